//! Dynamical systems: vector fields, samplers, analytic conserved quantities
//! and a fixed-step RK4 integrator used for validation.

pub mod pde;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{self, Dual};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use pde::{Mixture, PdeGrid};

/// Names accepted by [`System::from_name`].
pub const SYSTEM_NAMES: [&str; 9] =
    ["kepler", "kepler-aug", "damped-ho", "iso-ho", "aniso-ho", "threebody", "threebody-aug", "kdv", "nls"];

/// Rejected draws allowed per accepted point before the sampler gives up.
const MAX_DRAWS_PER_POINT: usize = 100;

/// Optional overrides for a named system. Unset fields take the defaults of
/// the named system.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub gamma: Option<f64>,
    pub omega_x: Option<f64>,
    pub omega_y: Option<f64>,
    pub mass: Option<f64>,
    pub masses: Option<[f64; 3]>,
    pub kappa: Option<f64>,
    pub box_half: Option<f64>,
    pub min_dist: Option<f64>,
    pub n_points: Option<usize>,
    pub interval: Option<[f64; 2]>,
    pub n_mix: Option<usize>,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kind {
    Kepler,
    DampedHo { gamma: f64 },
    Ho { m: f64, wx: f64, wy: f64 },
    ThreeBody { masses: [f64; 3] },
    Kdv(PdeGrid),
    Nls { grid: PdeGrid, kappa: f64 },
}

#[derive(Clone, Debug)]
pub struct System {
    name: String,
    kind: Kind,
    augmented: bool,
    labels: Vec<String>,
    box_half: f64,
    min_dist: f64,
}

/// A batch of sampled phase-space points (one per row).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub system: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub points: Array2<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.points.row(i).to_slice().expect("standard layout")
    }

    /// Contiguous sub-batch of rows `[lo, hi)`.
    pub fn slice(&self, lo: usize, hi: usize) -> SampleBatch {
        SampleBatch {
            system: self.system.clone(),
            seed: self.seed,
            labels: self.labels.clone(),
            points: self.points.slice(ndarray::s![lo..hi, ..]).to_owned(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

type CqFn = dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync;

/// Closed-form conserved quantity with exact gradient.
#[derive(Clone)]
pub struct AnalyticCq {
    pub label: String,
    f: Arc<CqFn>,
}

impl std::fmt::Debug for AnalyticCq {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AnalyticCq({})", self.label)
    }
}

impl AnalyticCq {
    pub fn new(label: &str, f: impl Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'static) -> Self {
        AnalyticCq { label: label.to_string(), f: Arc::new(f) }
    }

    /// A quantity of the first `base` coordinates written with duals; the
    /// gradient is zero-padded to the full state length.
    fn from_dual(label: &str, base: usize, f: fn(&[Dual]) -> Dual) -> Self {
        Self::new(label, move |z| {
            let d = f(&Dual::vars(&z[..base]));
            let mut g = d.g;
            g.resize(z.len(), 0.0);
            (d.v, g)
        })
    }

    fn from_dual_with<P: Send + Sync + 'static>(
        label: &str,
        base: usize,
        p: P,
        f: fn(&P, &[Dual]) -> Dual,
    ) -> Self {
        Self::new(label, move |z| {
            let d = f(&p, &Dual::vars(&z[..base]));
            let mut g = d.g;
            g.resize(z.len(), 0.0);
            (d.v, g)
        })
    }

    /// Grid sum of a density over the first `k` components of each
    /// `stride`-sized block.
    fn integral<P: Send + Sync + 'static>(label: &str, stride: usize, k: usize, p: P, h: fn(&P, &[Dual]) -> Dual) -> Self {
        Self::new(label, move |z| {
            let mut g = vec![0.0; z.len()];
            let mut v = 0.0;
            for (blk, gb) in z.chunks(stride).zip(g.chunks_mut(stride)) {
                let d = h(&p, &Dual::vars(&blk[..k]));
                v += d.v;
                gb[..k].copy_from_slice(&d.g);
            }
            (v, g)
        })
    }

    pub fn eval(&self, z: &[f64]) -> (f64, Vec<f64>) {
        (self.f)(z)
    }
}

fn radius_of(x: f64, y: f64) -> f64 {
    x.hypot(y)
}

impl System {
    pub fn from_name(name: &str) -> Result<System> {
        Self::with_params(name, &SystemParams::default())
    }

    pub fn with_params(name: &str, p: &SystemParams) -> Result<System> {
        let (base, aug) = match name.strip_suffix("-aug") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let grid = || -> Result<PdeGrid> {
            let mut g = PdeGrid::default();
            if let Some(n) = p.n_points {
                g.n_points = n;
            }
            if let Some([a, b]) = p.interval {
                g.a = a;
                g.b = b;
            }
            if let Some(n) = p.n_mix {
                g.n_mix = n;
            }
            if let Some(s) = p.sigma {
                g.sigma = s;
            }
            g.validate()?;
            Ok(g)
        };
        let kind = match base {
            "kepler" => Kind::Kepler,
            "damped-ho" => {
                let gamma = p.gamma.unwrap_or(0.0);
                if !(gamma >= 0.0 && gamma.is_finite()) {
                    return Err(Error::Config(format!("system.params.gamma must be >= 0, got {gamma}")));
                }
                Kind::DampedHo { gamma }
            }
            "iso-ho" | "aniso-ho" => {
                let wy_default = if base == "iso-ho" { 1.0 } else { 2.0 };
                let m = p.mass.unwrap_or(1.0);
                let wx = p.omega_x.unwrap_or(1.0);
                let wy = p.omega_y.unwrap_or(wy_default);
                if !(m > 0.0 && wx > 0.0 && wy > 0.0) {
                    return Err(Error::Config("oscillator mass and frequencies must be positive".into()));
                }
                Kind::Ho { m, wx, wy }
            }
            "threebody" => {
                let masses = p.masses.unwrap_or([1.0; 3]);
                if masses.iter().any(|&m| !(m > 0.0)) {
                    return Err(Error::Config("system.params.masses must be positive".into()));
                }
                Kind::ThreeBody { masses }
            }
            "kdv" => Kind::Kdv(grid()?),
            "nls" => Kind::Nls { grid: grid()?, kappa: p.kappa.unwrap_or(1.0) },
            _ => return Err(Error::Config(format!("unknown system '{name}'"))),
        };
        let mut sys = System {
            name: base.to_string(),
            labels: Vec::new(),
            kind,
            augmented: false,
            box_half: p.box_half.unwrap_or(2.0),
            min_dist: p.min_dist.unwrap_or(0.1),
        };
        if !(sys.box_half > 0.0) || !(sys.min_dist >= 0.0) {
            return Err(Error::Config("box_half must be positive and min_dist non-negative".into()));
        }
        sys.labels = sys.base_labels();
        if aug {
            sys = sys.augment()?;
        }
        Ok(sys)
    }

    fn base_labels(&self) -> Vec<String> {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match &self.kind {
            Kind::Kepler | Kind::Ho { .. } => v(&["x", "p_x", "y", "p_y"]),
            Kind::DampedHo { .. } => v(&["x", "p"]),
            Kind::ThreeBody { .. } => (1..=3)
                .flat_map(|i| ["x", "y", "p_x", "p_y"].map(|c| format!("{c}{i}")))
                .collect(),
            Kind::Kdv(g) => (0..g.n_points)
                .flat_map(|i| (0..pde::KDV_ORDERS).map(move |k| format!("phi_d{k}_{i}")))
                .collect(),
            Kind::Nls { grid, .. } => (0..grid.n_points)
                .flat_map(|i| {
                    let mags = (0..pde::NLS_MAGS).map(move |k| format!("abs_psi_d{k}_{i}"));
                    let parts = (0..pde::NLS_ORDERS)
                        .flat_map(move |k| [format!("re_psi_d{k}_{i}"), format!("im_psi_d{k}_{i}")]);
                    mags.chain(parts)
                })
                .collect(),
        }
    }

    /// Full name including the `-aug` suffix when augmented.
    pub fn name(&self) -> String {
        if self.augmented {
            format!("{}-aug", self.name)
        } else {
            self.name.clone()
        }
    }

    pub fn kind(&self) -> &Kind {
        &self.kind
    }

    pub fn s(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn is_pde(&self) -> bool {
        matches!(self.kind, Kind::Kdv(_) | Kind::Nls { .. })
    }

    /// The unaugmented system.
    pub fn base(&self) -> System {
        let mut b = self.clone();
        b.augmented = false;
        b.labels = b.base_labels();
        b
    }

    /// Masses of the three bodies (three-body systems only).
    pub fn masses(&self) -> Option<[f64; 3]> {
        match self.kind {
            Kind::ThreeBody { masses } => Some(masses),
            _ => None,
        }
    }

    /// Block size and per-point feature names `(name, offset, absolute)` for PDE systems.
    pub fn pde_layout(&self) -> Option<(usize, Vec<(String, usize, bool)>)> {
        match &self.kind {
            Kind::Kdv(_) => Some((
                pde::KDV_ORDERS,
                vec![("phi".into(), 0, false), ("|phi_x|".into(), 1, true), ("|phi_xx|".into(), 2, true)],
            )),
            Kind::Nls { .. } => Some((
                pde::NLS_STRIDE,
                vec![("|psi|".into(), 0, false), ("|psi_x|".into(), 1, false), ("|psi_xx|".into(), 2, false)],
            )),
            _ => None,
        }
    }

    pub fn grid(&self) -> Option<&PdeGrid> {
        match &self.kind {
            Kind::Kdv(g) | Kind::Nls { grid: g, .. } => Some(g),
            _ => None,
        }
    }

    /// Parameters as a flat map, for manifests and reports.
    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match &self.kind {
            Kind::Kepler => {}
            Kind::DampedHo { gamma } => {
                m.insert("gamma".into(), *gamma);
            }
            Kind::Ho { m: mass, wx, wy } => {
                m.insert("mass".into(), *mass);
                m.insert("omega_x".into(), *wx);
                m.insert("omega_y".into(), *wy);
            }
            Kind::ThreeBody { masses } => {
                for (i, v) in masses.iter().enumerate() {
                    m.insert(format!("m{}", i + 1), *v);
                }
            }
            Kind::Kdv(g) | Kind::Nls { grid: g, .. } => {
                m.insert("n_points".into(), g.n_points as f64);
                m.insert("a".into(), g.a);
                m.insert("b".into(), g.b);
                m.insert("n_mix".into(), g.n_mix as f64);
                m.insert("sigma".into(), g.sigma);
                if let Kind::Nls { kappa, .. } = &self.kind {
                    m.insert("kappa".into(), *kappa);
                }
            }
        }
        if matches!(self.kind, Kind::Kepler | Kind::ThreeBody { .. }) {
            m.insert("min_dist".into(), self.min_dist);
        }
        if !self.is_pde() {
            m.insert("box_half".into(), self.box_half);
        }
        m
    }

    pub fn field(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.s()];
        self.field_into(z, &mut out)?;
        Ok(out)
    }

    pub fn field_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.s(), z.len())?;
        check_dim(self.s(), out.len())?;
        match &self.kind {
            Kind::Kepler => {
                let (x, vx, y, vy) = (z[0], z[1], z[2], z[3]);
                let r = radius_of(x, y);
                if r < 1e-12 {
                    return Err(Error::Domain("Kepler field at r = 0".into()));
                }
                let r3 = r * r * r;
                out[..4].copy_from_slice(&[vx, -x / r3, vy, -y / r3]);
                if self.augmented {
                    out[4] = (x * vx + y * vy) / z[4];
                }
            }
            Kind::DampedHo { gamma } => {
                out[0] = z[1];
                out[1] = -z[0] - gamma * z[1];
            }
            Kind::Ho { m, wx, wy } => {
                out[0] = z[1] / m;
                out[1] = -m * wx * wx * z[0];
                out[2] = z[3] / m;
                out[3] = -m * wy * wy * z[2];
            }
            Kind::ThreeBody { masses } => {
                for i in 0..3 {
                    out[4 * i] = z[4 * i + 2];
                    out[4 * i + 1] = z[4 * i + 3];
                    out[4 * i + 2] = 0.0;
                    out[4 * i + 3] = 0.0;
                }
                for i in 0..3 {
                    for j in (i + 1)..3 {
                        let dx = z[4 * j] - z[4 * i];
                        let dy = z[4 * j + 1] - z[4 * i + 1];
                        let r = radius_of(dx, dy);
                        if r < 1e-12 {
                            return Err(Error::Domain(format!("bodies {} and {} coincide", i + 1, j + 1)));
                        }
                        let r3 = r * r * r;
                        out[4 * i + 2] += masses[j] * dx / r3;
                        out[4 * i + 3] += masses[j] * dy / r3;
                        out[4 * j + 2] -= masses[i] * dx / r3;
                        out[4 * j + 3] -= masses[i] * dy / r3;
                    }
                }
                if self.augmented {
                    for (k, (i, j)) in PAIRS.iter().enumerate() {
                        let dx = z[4 * j] - z[4 * i];
                        let dy = z[4 * j + 1] - z[4 * i + 1];
                        let dvx = z[4 * j + 2] - z[4 * i + 2];
                        let dvy = z[4 * j + 3] - z[4 * i + 3];
                        out[12 + k] = (dx * dvx + dy * dvy) / z[12 + k];
                    }
                }
            }
            Kind::Kdv(_) => pde::kdv_field(z, out),
            Kind::Nls { kappa, .. } => pde::nls_field(z, *kappa, out)?,
        }
        Ok(())
    }

    /// Append radius coordinates (Kepler: r; three-body: r12, r13, r23).
    pub fn augment(&self) -> Result<System> {
        if self.augmented {
            return Err(Error::Unsupported(format!("{} is already augmented", self.name())));
        }
        let extra: Vec<String> = match self.kind {
            Kind::Kepler => vec!["r".into()],
            Kind::ThreeBody { .. } => PAIRS.iter().map(|(i, j)| format!("r{}{}", i + 1, j + 1)).collect(),
            _ => return Err(Error::Unsupported(format!("cannot augment {}", self.name))),
        };
        let mut s = self.clone();
        s.augmented = true;
        s.labels.extend(extra);
        Ok(s)
    }

    /// Augmented coordinates computed from a base state.
    pub fn augment_point(&self, base: &[f64]) -> Vec<f64> {
        let mut z = base.to_vec();
        if self.augmented {
            match self.kind {
                Kind::Kepler => z.push(radius_of(base[0], base[2])),
                Kind::ThreeBody { .. } => {
                    for (i, j) in PAIRS {
                        z.push(radius_of(base[4 * j] - base[4 * i], base[4 * j + 1] - base[4 * i + 1]));
                    }
                }
                _ => {}
            }
        }
        z
    }

    /// Draw one candidate point; `None` when rejected.
    fn draw<R: Rng>(&self, rng: &mut R) -> Option<Vec<f64>> {
        let bh = self.box_half;
        let mut uni = |n: usize| (0..n).map(|_| rng.gen_range(-bh..=bh)).collect::<Vec<f64>>();
        match &self.kind {
            Kind::Kepler => {
                let z = uni(4);
                (radius_of(z[0], z[2]) >= self.min_dist).then(|| self.augment_point(&z))
            }
            Kind::DampedHo { .. } => Some(uni(2)),
            Kind::Ho { .. } => Some(uni(4)),
            Kind::ThreeBody { .. } => {
                let z = uni(12);
                let ok = PAIRS
                    .iter()
                    .all(|(i, j)| radius_of(z[4 * j] - z[4 * i], z[4 * j + 1] - z[4 * i + 1]) >= self.min_dist);
                ok.then(|| self.augment_point(&z))
            }
            Kind::Kdv(g) => {
                let m = g.draw_mixture(rng);
                let z = pde::kdv_state(g, &m).ok()?;
                pde::endpoint_ok(&z, pde::KDV_ORDERS, 0).then_some(z)
            }
            Kind::Nls { grid, .. } => {
                let re = grid.draw_mixture(rng);
                let im = grid.draw_mixture(rng);
                let z = pde::nls_state(grid, &re, &im).ok()?;
                pde::endpoint_ok(&z, pde::NLS_STRIDE, 0).then_some(z)
            }
        }
    }

    /// `p` accepted points; point `i` uses its own counter-based stream, so the
    /// batch does not depend on the number of worker threads.
    pub fn sample(&self, p: usize, seed: u64) -> Result<SampleBatch> {
        if p == 0 {
            return Err(Error::Config("sample size must be at least 1".into()));
        }
        let rows: Vec<(Option<Vec<f64>>, usize)> = (0..p)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                for attempt in 1..=MAX_DRAWS_PER_POINT {
                    if let Some(z) = self.draw(&mut rng) {
                        return (Some(z), attempt);
                    }
                }
                (None, MAX_DRAWS_PER_POINT)
            })
            .collect();
        let attempts: usize = rows.iter().map(|r| r.1).sum();
        let accepted = rows.iter().filter(|r| r.0.is_some()).count();
        if accepted < p {
            return Err(Error::Starvation { accepted, attempts });
        }
        let s = self.s();
        let mut points = Array2::zeros((p, s));
        for (i, (z, _)) in rows.into_iter().enumerate() {
            points.row_mut(i).assign(&ndarray::ArrayView1::from(&z.expect("accepted")));
        }
        Ok(SampleBatch { system: self.name(), seed, labels: self.labels.clone(), points })
    }

    /// Grid state for explicit mixtures (`im` is required for NLS only).
    pub fn build_pde_state(&self, re: &Mixture, im: Option<&Mixture>) -> Result<Vec<f64>> {
        match &self.kind {
            Kind::Kdv(g) => pde::kdv_state(g, re),
            Kind::Nls { grid, .. } => {
                let zero = Mixture { amps: vec![], mus: vec![], sigma: grid.sigma };
                pde::nls_state(grid, re, im.unwrap_or(&zero))
            }
            _ => Err(Error::Unsupported(format!("{} is not a field theory", self.name()))),
        }
    }

    /// Registered closed-form conserved quantities.
    pub fn analytic_cqs(&self) -> Vec<AnalyticCq> {
        match &self.kind {
            Kind::Kepler => vec![
                AnalyticCq::from_dual("energy", 4, |v| {
                    let r = (v[0].sqr() + v[2].sqr()).sqrt();
                    (v[1].sqr() + v[3].sqr()) * 0.5 - r.recip()
                }),
                AnalyticCq::from_dual("angular_momentum", 4, |v| &v[0] * &v[3] - &v[2] * &v[1]),
                AnalyticCq::from_dual("runge_lenz_x", 4, |v| {
                    let r = (v[0].sqr() + v[2].sqr()).sqrt();
                    let l = &v[0] * &v[3] - &v[2] * &v[1];
                    &v[3] * &l - &v[0] / &r
                }),
            ],
            Kind::DampedHo { gamma } => vec![damped_cq(*gamma)],
            Kind::Ho { m, wx, wy } => {
                let p = (*m, *wx, *wy);
                let mut v = vec![
                    AnalyticCq::from_dual_with("energy_x", 4, p, |&(m, wx, _), v| {
                        (v[1].sqr() * (1.0 / m) + v[0].sqr() * (m * wx * wx)) * 0.5
                    }),
                    AnalyticCq::from_dual_with("energy_y", 4, p, |&(m, _, wy), v| {
                        (v[3].sqr() * (1.0 / m) + v[2].sqr() * (m * wy * wy)) * 0.5
                    }),
                    AnalyticCq::from_dual_with("phase", 4, p, |&(m, wx, wy), v| {
                        let tx = v[1].scale(1.0 / (m * wx)).atan2(&v[0]);
                        let ty = v[3].scale(1.0 / (m * wy)).atan2(&v[2]);
                        tx.scale(wy) - ty.scale(wx)
                    }),
                ];
                if wx == wy {
                    v.push(AnalyticCq::from_dual_with("cross", 4, p, |&(m, w, _), v| {
                        (&v[0] * &v[2]) * (m * w * w) + (&v[1] * &v[3]) * (1.0 / m)
                    }));
                    v.push(AnalyticCq::from_dual("angular_momentum", 4, |v| &v[0] * &v[3] - &v[2] * &v[1]));
                }
                v
            }
            Kind::ThreeBody { masses } => {
                let ms = *masses;
                vec![
                    AnalyticCq::from_dual_with("energy", 12, ms, |m, v| {
                        let mut terms = Vec::new();
                        for i in 0..3 {
                            terms.push((v[4 * i + 2].sqr() + v[4 * i + 3].sqr()) * (0.5 * m[i]));
                        }
                        for (i, j) in PAIRS {
                            let r = ((&v[4 * j] - &v[4 * i]).sqr() + (&v[4 * j + 1] - &v[4 * i + 1]).sqr()).sqrt();
                            terms.push(r.recip() * (-m[i] * m[j]));
                        }
                        dual::sum(&terms)
                    }),
                    AnalyticCq::from_dual_with("angular_momentum", 12, ms, |m, v| {
                        let t: Vec<Dual> = (0..3)
                            .map(|i| (&v[4 * i] * &v[4 * i + 3] - &v[4 * i + 1] * &v[4 * i + 2]) * m[i])
                            .collect();
                        dual::sum(&t)
                    }),
                    AnalyticCq::from_dual_with("momentum_x", 12, ms, |m, v| {
                        dual::sum(&(0..3).map(|i| v[4 * i + 2].scale(m[i])).collect::<Vec<_>>())
                    }),
                    AnalyticCq::from_dual_with("momentum_y", 12, ms, |m, v| {
                        dual::sum(&(0..3).map(|i| v[4 * i + 3].scale(m[i])).collect::<Vec<_>>())
                    }),
                ]
            }
            Kind::Kdv(_) => vec![
                AnalyticCq::integral("mass", pde::KDV_ORDERS, 1, (), |_, v| v[0].clone()),
                AnalyticCq::integral("momentum", pde::KDV_ORDERS, 1, (), |_, v| v[0].sqr()),
                AnalyticCq::integral("energy", pde::KDV_ORDERS, 2, (), |_, v| {
                    v[0].powi(3) * 2.0 + v[1].sqr()
                }),
            ],
            Kind::Nls { kappa, .. } => vec![
                AnalyticCq::integral("unitarity", pde::NLS_STRIDE, 1, (), |_, v| v[0].sqr()),
                AnalyticCq::integral("energy", pde::NLS_STRIDE, 2, *kappa, |k, v| {
                    v[1].sqr() + v[0].powi(4) * *k
                }),
            ],
        }
    }

    /// Gradients of the augmentation constraints r − ρ(z) at `z`.
    pub fn constraint_normals(&self, z: &[f64]) -> Vec<Vec<f64>> {
        if !self.augmented {
            return Vec::new();
        }
        let s = self.s();
        match self.kind {
            Kind::Kepler => {
                let rho = radius_of(z[0], z[2]);
                let mut n = vec![0.0; s];
                n[0] = -z[0] / rho;
                n[2] = -z[2] / rho;
                n[4] = 1.0;
                vec![n]
            }
            Kind::ThreeBody { .. } => PAIRS
                .iter()
                .enumerate()
                .map(|(k, &(i, j))| {
                    let dx = z[4 * j] - z[4 * i];
                    let dy = z[4 * j + 1] - z[4 * i + 1];
                    let rho = radius_of(dx, dy);
                    let mut n = vec![0.0; s];
                    n[4 * j] = -dx / rho;
                    n[4 * j + 1] = -dy / rho;
                    n[4 * i] = dx / rho;
                    n[4 * i + 1] = dy / rho;
                    n[12 + k] = 1.0;
                    n
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Remove from `g` its components along the augmentation constraint
    /// normals, so functions of the constraints alone have zero gradient.
    pub fn project_tangent(&self, z: &[f64], g: &mut [f64]) {
        if !self.augmented {
            return;
        }
        let basis = linalg::orthonormalize(&self.constraint_normals(z), 1e-14);
        for q in &basis {
            let c = linalg::dot(q, g);
            for (gi, qi) in g.iter_mut().zip(q) {
                *gi -= c * qi;
            }
        }
    }

    /// |f̂ · ∇̂H| at `z` for a supplied gradient.
    pub fn residual(&self, z: &[f64], grad: &[f64]) -> Result<f64> {
        check_dim(self.s(), grad.len())?;
        let f = self.field(z)?;
        let mut g = grad.to_vec();
        self.project_tangent(z, &mut g);
        let nf = linalg::norm(&f);
        let ng = linalg::norm(&g);
        if nf < 1e-12 || ng < 1e-12 {
            return Err(Error::Degenerate(format!("|f| = {nf:.3e}, |grad H| = {ng:.3e}")));
        }
        Ok((linalg::dot(&f, &g) / (nf * ng)).abs())
    }

    /// Classical RK4 with fixed step.
    pub fn integrate(&self, z0: &[f64], dt: f64, n: usize) -> Result<Trajectory> {
        check_dim(self.s(), z0.len())?;
        if self.is_pde() {
            return Err(Error::Unsupported("trajectories of discretised field theories".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        let s = self.s();
        let mut states = Vec::with_capacity(n + 1);
        states.push(z0.to_vec());
        let mut z = z0.to_vec();
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; s], vec![0.0; s], vec![0.0; s], vec![0.0; s]);
        let mut tmp = vec![0.0; s];
        let fail = |step| Error::Divergence { step };
        for step in 1..=n {
            self.field_into(&z, &mut k1).map_err(|_| fail(step))?;
            for i in 0..s {
                tmp[i] = z[i] + 0.5 * dt * k1[i];
            }
            self.field_into(&tmp, &mut k2).map_err(|_| fail(step))?;
            for i in 0..s {
                tmp[i] = z[i] + 0.5 * dt * k2[i];
            }
            self.field_into(&tmp, &mut k3).map_err(|_| fail(step))?;
            for i in 0..s {
                tmp[i] = z[i] + dt * k3[i];
            }
            self.field_into(&tmp, &mut k4).map_err(|_| fail(step))?;
            for i in 0..s {
                z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(fail(step));
            }
            states.push(z.clone());
        }
        let times = (0..=n).map(|i| i as f64 * dt).collect();
        Ok(Trajectory { dt, times, states })
    }
}

/// Body pairs in the order (1,2), (1,3), (2,3).
pub const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// |f̂ · ∇̂H| for a gradient evaluator.
pub fn conservation_residual(sys: &System, grad: impl Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> Result<f64> {
    sys.residual(z, &grad(z))
}

/// First integral of ẋ = p, ṗ = −x − γp.
fn damped_cq(gamma: f64) -> AnalyticCq {
    if gamma == 0.0 {
        return AnalyticCq::from_dual("radius_sq", 2, |v| v[0].sqr() + v[1].sqr());
    }
    if gamma < 2.0 {
        // (u, w) rotates at rate ω while its radius decays at rate γ/2.
        AnalyticCq::from_dual_with("spiral_phase", 2, gamma, |&g, v| {
            let w0 = (1.0 - g * g / 4.0).sqrt();
            let u = v[0].clone();
            let w = (&v[1] + &v[0].scale(g / 2.0)).scale(1.0 / w0);
            let ln_rho = (u.sqr() + w.sqr()).ln().scale(0.5);
            w.atan2(&u) - ln_rho.scale(2.0 * w0 / g)
        })
    } else if gamma == 2.0 {
        // Critical damping: q = x + p decays as e^{−t}, x/q grows linearly.
        AnalyticCq::from_dual("critical", 2, |v| {
            let q = &v[0] + &v[1];
            &v[0] / &q + q.abs().ln()
        })
    } else {
        // Eigen-coordinates y_k with ẏ_k = λ_k y_k.
        AnalyticCq::from_dual_with("eigen_log", 2, gamma, |&g, v| {
            let d = (g * g / 4.0 - 1.0).sqrt();
            let (l1, l2) = (-g / 2.0 + d, -g / 2.0 - d);
            // Left eigenvectors of [[0,1],[-1,-g]] are (-λ_other, 1)·(x, p) up to scale.
            let y1 = &v[1] + &v[0].scale(-l2);
            let y2 = &v[1] + &v[0].scale(-l1);
            y1.abs().ln().scale(1.0 / l1) - y2.abs().ln().scale(1.0 / l2)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_names_resolve() {
        for n in SYSTEM_NAMES {
            let s = System::from_name(n).unwrap();
            assert_eq!(s.name(), n);
            assert_eq!(s.labels().len(), s.s());
        }
        assert!(System::from_name("hubbard").is_err());
    }

    #[test]
    fn damped_cqs_conserved() {
        for g in [0.0, 0.01, 1.0, 2.0, 3.0, 100.0] {
            let sys = System::with_params("damped-ho", &SystemParams { gamma: Some(g), ..Default::default() })
                .unwrap();
            let cq = &sys.analytic_cqs()[0];
            for z in [[0.3, -1.2], [1.5, 0.7], [-0.4, 0.9]] {
                let r = sys.residual(&z, &cq.eval(&z).1).unwrap();
                assert!(r < 1e-12, "gamma {g}: {r}");
            }
        }
    }
}
