//! Functional independence: differential rank from gradient matrices, a
//! local-PCA manifold dimension of the value cloud, and the two incremental
//! independence tests used when growing a set of conserved quantities.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::NeuralField;
use crate::systems::{AnalyticCq, System};

/// Default explained-variance threshold for vanishing components.
pub const DEFAULT_EPS: f64 = 1e-2;
/// Method A threshold on the smallest singular value.
pub const EPS_SIGMA: f64 = 1e-3;
/// Method B threshold on |t̂·∇̂H|.
pub const EPS_I: f64 = 1e-3;
/// Evaluation points for k_D.
pub const RANK_POINTS: usize = 100;
const GRAD_FLOOR: f64 = 1e-12;

/// A scalar function with gradient; `None` where it is undefined.
pub trait ScalarFn: Sync {
    fn eval_grad(&self, z: &[f64]) -> Option<(f64, Vec<f64>)>;

    /// Directions the gradient is constrained to be orthogonal to at `z`.
    fn normals(&self, _z: &[f64]) -> Vec<Vec<f64>> {
        Vec::new()
    }

    /// Values and gradients on many points.
    fn eval_many(&self, pts: ArrayView2<f64>) -> Vec<Option<(f64, Vec<f64>)>> {
        pts.rows().into_iter().map(|r| self.eval_grad(&r.to_vec())).collect()
    }
}

impl ScalarFn for AnalyticCq {
    fn eval_grad(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (v, g) = self.eval(z);
        (v.is_finite() && g.iter().all(|x| x.is_finite())).then_some((v, g))
    }
}

impl ScalarFn for NeuralField {
    fn eval_grad(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        Some((self.forward(z).ok()?, self.grad_input(z).ok()?))
    }

    fn eval_many(&self, pts: ArrayView2<f64>) -> Vec<Option<(f64, Vec<f64>)>> {
        let mut out = Vec::with_capacity(pts.nrows());
        for lo in (0..pts.nrows()).step_by(1024) {
            let hi = (lo + 1024).min(pts.nrows());
            match self.eval_batch(pts.slice(ndarray::s![lo..hi, ..])) {
                Ok((v, g)) => out.extend((0..hi - lo).map(|i| Some((v[i], g.row(i).to_vec())))),
                Err(_) => out.extend((lo..hi).map(|_| None)),
            }
        }
        out
    }
}

/// Wrap a closure returning value and gradient.
pub struct FnScalar<F>(pub F);

impl<F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync> ScalarFn for FnScalar<F> {
    fn eval_grad(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        Some((self.0)(z))
    }
}

/// A function restricted to the constraint surface of an augmented system:
/// gradients are projected onto the tangent space.
pub struct Projected<'a, F: ?Sized> {
    pub inner: &'a F,
    pub sys: &'a System,
}

impl<F: ScalarFn + ?Sized> ScalarFn for Projected<'_, F> {
    fn eval_grad(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (v, mut g) = self.inner.eval_grad(z)?;
        self.sys.project_tangent(z, &mut g);
        Some((v, g))
    }

    fn normals(&self, z: &[f64]) -> Vec<Vec<f64>> {
        self.sys.constraint_normals(z)
    }
}

fn unit(g: &[f64]) -> Option<Vec<f64>> {
    let n = linalg::norm(g);
    (n >= GRAD_FLOOR && n.is_finite()).then(|| g.iter().map(|x| x / n).collect())
}

/// s×n matrix of unit-normalised gradients at `z`.
pub fn gradient_matrix(fs: &[&dyn ScalarFn], z: &[f64]) -> Result<Array2<f64>> {
    let mut b = Array2::zeros((z.len(), fs.len()));
    for (j, f) in fs.iter().enumerate() {
        let (_, g) = f.eval_grad(z).ok_or_else(|| Error::Degenerate(format!("function {j} undefined at point")))?;
        if g.len() != z.len() {
            return Err(Error::Dimension { expected: z.len(), got: g.len() });
        }
        let u = unit(&g).ok_or_else(|| Error::Degenerate(format!("function {j} has vanishing gradient")))?;
        b.column_mut(j).assign(&ndarray::ArrayView1::from(&u));
    }
    Ok(b)
}

pub fn singular_values(m: &Array2<f64>) -> Result<Vec<f64>> {
    linalg::singular_values(m)
}

/// Number of explained-variance fractions at or above `eps`.
pub fn rank_from_spectrum(sv: &[f64], eps: f64) -> usize {
    linalg::explained_fractions(sv).iter().filter(|&&f| f >= eps).count()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifoldCurve {
    pub scales: Vec<f64>,
    /// Mean local dimension per scale; `None` where the scale is invalid.
    pub n_eff: Vec<Option<f64>>,
    pub plateau: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub eps: f64,
    pub k_d: usize,
    pub per_point_rank: Vec<usize>,
    pub spectra: Vec<Vec<f64>>,
    pub fractions: Vec<Vec<f64>>,
    pub degenerate_points: usize,
    pub manifold: Option<ManifoldCurve>,
}

impl RankReport {
    /// Per component: mean, min and max explained fraction over points.
    pub fn fractions_csv(&self) -> String {
        let n = self.fractions.first().map_or(0, |f| f.len());
        let header = ["component", "mean_fraction", "min_fraction", "max_fraction"].map(String::from);
        let rows = (0..n).map(|k| {
            let col: Vec<f64> = self.fractions.iter().map(|f| f[k]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (vec![(k + 1).to_string()], vec![mean, min, max])
        });
        crate::csvio::table(&header, rows)
    }

    pub fn n_eff_csv(&self) -> String {
        let header = ["scale", "n_eff"].map(String::from);
        let rows = self.manifold.iter().flat_map(|m| {
            m.scales.iter().zip(&m.n_eff).map(|(&s, &v)| (vec![], vec![s, v.unwrap_or(f64::NAN)]))
        });
        crate::csvio::table(&header, rows)
    }
}

/// Seeded subsample of at most `k` row indices.
pub fn subsample(p: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p).collect();
    if p > k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// k_D = max over (at most [`RANK_POINTS`]) points of the rank of B(z).
pub fn differential_rank(fs: &[&dyn ScalarFn], points: ArrayView2<f64>, eps: f64, seed: u64) -> Result<RankReport> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!("rank.eps must lie in (0, 1), got {eps}")));
    }
    if fs.is_empty() {
        return Err(Error::Config("empty function set".into()));
    }
    let idx = subsample(points.nrows(), RANK_POINTS, seed);
    let sel = points.select(Axis(0), &idx);
    let evals: Vec<Vec<Option<(f64, Vec<f64>)>>> = fs.iter().map(|f| f.eval_many(sel.view())).collect();
    let mut rep = RankReport { eps, ..Default::default() };
    for (r, _) in idx.iter().enumerate() {
        let mut b = Array2::zeros((points.ncols(), fs.len()));
        let mut ok = true;
        for (j, e) in evals.iter().enumerate() {
            match e[r].as_ref().and_then(|(_, g)| unit(g)) {
                Some(u) => b.column_mut(j).assign(&ndarray::ArrayView1::from(&u)),
                None => ok = false,
            }
        }
        if !ok {
            rep.degenerate_points += 1;
            continue;
        }
        let sv = linalg::singular_values(&b)?;
        let fr = linalg::explained_fractions(&sv);
        let rank = fr.iter().filter(|&&f| f >= eps).count();
        rep.k_d = rep.k_d.max(rank);
        rep.per_point_rank.push(rank);
        rep.spectra.push(sv);
        rep.fractions.push(fr);
    }
    if rep.per_point_rank.is_empty() {
        return Err(Error::Degenerate("every evaluation point is degenerate".into()));
    }
    Ok(rep)
}

/// Default scale grid for [`manifold_rank`] (standardised units).
pub fn default_scales() -> Vec<f64> {
    (0..14).map(|k| 0.1 * 1.3f64.powi(k)).collect()
}

/// Local-PCA dimension of the rows of `a` (P×n value matrix) per scale.
///
/// A scale is valid when at least half of the anchors have more than n
/// neighbours; the estimate averages over those anchors.
pub fn manifold_rank(a: ArrayView2<f64>, scales: &[f64], seed: u64) -> Result<ManifoldCurve> {
    let (p, n) = a.dim();
    if p <= n {
        return Err(Error::Config(format!("manifold rank needs more rows than columns ({p} <= {n})")));
    }
    let mut x = a.to_owned();
    for mut col in x.columns_mut() {
        let mean = col.mean().unwrap_or(0.0);
        col -= mean;
        let sd = (col.dot(&col) / p as f64).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    let anchors = subsample(p, 100, seed ^ 0xA11C);
    let mut curve = ManifoldCurve { scales: scales.to_vec(), ..Default::default() };
    for &l in scales {
        let mut dims = Vec::new();
        for &i in &anchors {
            let ai = x.row(i);
            let nb: Vec<usize> = (0..p)
                .filter(|&j| {
                    let r = x.row(j);
                    ai.iter().zip(r.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() <= l * l
                })
                .collect();
            if nb.len() < n + 1 {
                continue;
            }
            let mut m = x.select(Axis(0), &nb);
            let mean = m.mean_axis(Axis(0)).expect("non-empty");
            m -= &mean;
            let sv = linalg::singular_values(&m)?;
            dims.push(rank_from_spectrum(&sv, DEFAULT_EPS) as f64);
        }
        let valid = dims.len() * 2 >= anchors.len();
        curve.n_eff.push(valid.then(|| dims.iter().sum::<f64>() / dims.len() as f64));
    }
    curve.plateau = plateau(&curve.n_eff);
    Ok(curve)
}

/// Longest run of equal rounded values over consecutive valid scales; ties
/// go to the smaller value.
pub fn plateau(n_eff: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    let mut run: Option<(usize, usize)> = None;
    for v in n_eff {
        run = match (v.map(|x| x.round() as usize), run) {
            (Some(d), Some((rd, len))) if rd == d => Some((d, len + 1)),
            (Some(d), _) => Some((d, 1)),
            (None, _) => None,
        };
        if let Some((d, len)) = run {
            best = match best {
                Some((bd, bl)) if bl > len || (bl == len && bd <= d) => Some((bd, bl)),
                _ => Some((d, len)),
            };
        }
    }
    best.map(|(d, _)| d)
}

/// Method A: the candidate is independent when appending it lifts the
/// smallest singular value of B to at least `eps_sigma` somewhere.
pub fn is_independent_a(known: &[&dyn ScalarFn], cand: &dyn ScalarFn, points: ArrayView2<f64>, eps_sigma: f64) -> Result<bool> {
    let mut fs: Vec<&dyn ScalarFn> = known.to_vec();
    fs.push(cand);
    if fs.len() > points.ncols() {
        return Ok(false);
    }
    let mut any = false;
    for r in points.rows().into_iter().take(RANK_POINTS) {
        let z = r.to_vec();
        let Ok(b) = gradient_matrix(&fs, &z) else { continue };
        any = true;
        let sv = linalg::singular_values(&b)?;
        if *sv.last().expect("non-empty") >= eps_sigma {
            return Ok(true);
        }
    }
    if !any {
        return Err(Error::Degenerate("no usable point for Method A".into()));
    }
    Ok(false)
}

/// Method B: project a seeded random vector off the known gradients and test
/// whether the candidate gradient has a component along it. Returns `None`
/// when no usable complement direction could be drawn.
pub fn is_independent_b(
    known: &[&dyn ScalarFn],
    cand: &dyn ScalarFn,
    points: ArrayView2<f64>,
    eps_i: f64,
    seed: u64,
) -> Result<Option<bool>> {
    let s = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = 0;
    for r in points.rows() {
        let z = r.to_vec();
        let Some(gc) = cand.eval_grad(&z).and_then(|(_, g)| unit(&g)) else { continue };
        let mut span = cand.normals(&z);
        let mut ok = true;
        for k in known {
            match k.eval_grad(&z).and_then(|(_, g)| unit(&g)) {
                Some(u) => span.push(u),
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let basis = linalg::orthonormalize(&span, 1e-10);
        if basis.len() >= s {
            return Ok(None);
        }
        let mut t = None;
        for _ in 0..=5 {
            let v: Vec<f64> = (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = linalg::orthogonal_residual(&v, &basis);
            if linalg::norm(&w) >= 1e-10 {
                t = unit(&w);
                break;
            }
        }
        let Some(t) = t else { return Ok(None) };
        used += 1;
        if linalg::dot(&t, &gc).abs() >= eps_i {
            return Ok(Some(true));
        }
    }
    if used == 0 {
        return Ok(None);
    }
    Ok(Some(false))
}

/// Method B with fallback to Method A.
pub fn is_independent(known: &[&dyn ScalarFn], cand: &dyn ScalarFn, test_points: ArrayView2<f64>, rank_points: ArrayView2<f64>, seed: u64) -> Result<bool> {
    match is_independent_b(known, cand, test_points, EPS_I, seed)? {
        Some(v) => Ok(v),
        None => is_independent_a(known, cand, rank_points, EPS_SIGMA),
    }
}

/// True when f and g are locally functions of each other.
pub fn equivalence_check(f: &dyn ScalarFn, g: &dyn ScalarFn, points: ArrayView2<f64>) -> Result<bool> {
    Ok(differential_rank(&[f, g], points, DEFAULT_EPS, 0)?.k_d == 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_prefers_longest_then_smaller() {
        let v = |xs: &[f64]| xs.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        assert_eq!(plateau(&v(&[1.0, 3.0, 3.0, 3.0, 4.0, 4.0])), Some(3));
        assert_eq!(plateau(&v(&[2.0, 2.0, 3.0, 3.0])), Some(2));
        assert_eq!(plateau(&[None, None]), None);
    }
}
