use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpCache};
use crate::error::{check_dim, Error, Result};
use crate::systems::{Kind, System, PAIRS};

/// Network architecture of one scalar field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArchSpec {
    /// One MLP over the whole state.
    Plain { hidden: Vec<usize> },
    /// H = Σ_i g(body_i) + Σ_{i<j} h(r_ij). With `per_body`, every body and
    /// every pair gets its own sub-network.
    AdditiveBody { bodies: usize, hidden: Vec<usize>, per_body: bool },
    /// H = Σ_points h(features at the point).
    IntegralPde { stride: usize, n_points: usize, features: Vec<PdeFeature>, hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeFeature {
    pub offset: usize,
    pub abs: bool,
}

/// Coordinates per body: (x, y, p_x, p_y).
pub const BODY_DIM: usize = 4;

impl ArchSpec {
    pub fn plain() -> Self {
        ArchSpec::Plain { hidden: vec![256, 256] }
    }

    /// Default architecture of `kind` for a system. `pde_features` selects
    /// how many per-point features an integral network sees.
    pub fn for_system(sys: &System, kind: &str, pde_features: usize) -> Result<ArchSpec> {
        match kind {
            "plain" => Ok(ArchSpec::plain()),
            "additive-body" => match sys.kind() {
                Kind::ThreeBody { masses } => Ok(ArchSpec::AdditiveBody {
                    bodies: 3,
                    hidden: vec![64, 64],
                    per_body: masses.iter().any(|&m| m != masses[0]),
                }),
                _ => Err(Error::Config(format!("additive-body architecture needs a three-body system, got {}", sys.name()))),
            },
            "integral-pde" => {
                let (stride, feats) = sys
                    .pde_layout()
                    .ok_or_else(|| Error::Config(format!("integral-pde architecture needs a PDE system, got {}", sys.name())))?;
                if pde_features == 0 || pde_features > feats.len() {
                    return Err(Error::Config(format!("train.pde_features must be in 1..={}", feats.len())));
                }
                Ok(ArchSpec::IntegralPde {
                    stride,
                    n_points: sys.grid().expect("pde").n_points,
                    features: feats[..pde_features].iter().map(|(_, o, a)| PdeFeature { offset: *o, abs: *a }).collect(),
                    hidden: vec![64, 64],
                })
            }
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ArchSpec::Plain { .. } => "plain",
            ArchSpec::AdditiveBody { .. } => "additive-body",
            ArchSpec::IntegralPde { .. } => "integral-pde",
        }
    }
}

/// Scalar input of a sub-network as a function of the state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Feature {
    Coord { c: usize, abs: bool },
    /// Euclidean distance between positions (a0, a1) and (b0, b1).
    Dist { a: [usize; 2], b: [usize; 2] },
}

/// Sparse Jacobian row of one feature (at most four entries).
#[derive(Clone, Copy, Debug, Default)]
struct JacRow {
    n: u8,
    e: [(usize, f64); 4],
}

impl Feature {
    fn eval(&self, z: &[f64]) -> (f64, JacRow) {
        match *self {
            Feature::Coord { c, abs } => {
                let v = z[c];
                let (val, d) = if abs { (v.abs(), if v < 0.0 { -1.0 } else { 1.0 }) } else { (v, 1.0) };
                let mut j = JacRow { n: 1, ..Default::default() };
                j.e[0] = (c, d);
                (val, j)
            }
            Feature::Dist { a, b } => {
                let dx = z[b[0]] - z[a[0]];
                let dy = z[b[1]] - z[a[1]];
                let r = dx.hypot(dy);
                let (ux, uy) = if r > 0.0 { (dx / r, dy / r) } else { (0.0, 0.0) };
                let j = JacRow { n: 4, e: [(b[0], ux), (b[1], uy), (a[0], -ux), (a[1], -uy)] };
                (r, j)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub mlp: usize,
    pub features: Vec<Feature>,
}

/// A scalar field H(z; θ) built as a sum of sub-network terms.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField {
    pub arch: ArchSpec,
    pub input_dim: usize,
    pub seed: u64,
    pub mlps: Vec<Mlp>,
    pub terms: Vec<Term>,
}

/// Forward pass with everything needed for the parameter gradient.
pub struct FieldTape {
    pub values: Array1<f64>,
    pub grads: Array2<f64>,
    groups: Vec<Group>,
}

struct Group {
    mlp: usize,
    terms: usize,
    jac: Vec<JacRow>,
    cache: MlpCache,
}

fn dims(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(1);
    d
}

impl NeuralField {
    fn layout(arch: &ArchSpec, input_dim: usize) -> Result<(Vec<Vec<usize>>, Vec<Term>)> {
        match arch {
            ArchSpec::Plain { hidden } => Ok((
                vec![dims(input_dim, hidden)],
                vec![Term { mlp: 0, features: (0..input_dim).map(|c| Feature::Coord { c, abs: false }).collect() }],
            )),
            ArchSpec::AdditiveBody { bodies, hidden, per_body } => {
                if input_dim < bodies * BODY_DIM {
                    return Err(Error::Dimension { expected: bodies * BODY_DIM, got: input_dim });
                }
                let pairs: Vec<(usize, usize)> = if *bodies == 3 {
                    PAIRS.to_vec()
                } else {
                    (0..*bodies).flat_map(|i| ((i + 1)..*bodies).map(move |j| (i, j))).collect()
                };
                let mut shapes = Vec::new();
                let mut terms = Vec::new();
                let n_g = if *per_body { *bodies } else { 1 };
                for _ in 0..n_g {
                    shapes.push(dims(BODY_DIM, hidden));
                }
                for i in 0..*bodies {
                    let features = (0..BODY_DIM).map(|k| Feature::Coord { c: BODY_DIM * i + k, abs: false }).collect();
                    terms.push(Term { mlp: if *per_body { i } else { 0 }, features });
                }
                let n_h = if *per_body { pairs.len() } else { 1 };
                for _ in 0..n_h {
                    shapes.push(dims(1, hidden));
                }
                for (k, (i, j)) in pairs.iter().enumerate() {
                    let f = Feature::Dist { a: [BODY_DIM * i, BODY_DIM * i + 1], b: [BODY_DIM * j, BODY_DIM * j + 1] };
                    terms.push(Term { mlp: n_g + if *per_body { k } else { 0 }, features: vec![f] });
                }
                Ok((shapes, terms))
            }
            ArchSpec::IntegralPde { stride, n_points, features, hidden } => {
                check_dim(stride * n_points, input_dim)?;
                if features.iter().any(|f| f.offset >= *stride) {
                    return Err(Error::Config("PDE feature offset outside the per-point block".into()));
                }
                let terms = (0..*n_points)
                    .map(|p| Term {
                        mlp: 0,
                        features: features.iter().map(|f| Feature::Coord { c: p * stride + f.offset, abs: f.abs }).collect(),
                    })
                    .collect();
                Ok((vec![dims(features.len(), hidden)], terms))
            }
        }
    }

    pub fn init(arch: &ArchSpec, input_dim: usize, seed: u64) -> Result<NeuralField> {
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let (shapes, terms) = Self::layout(arch, input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlps = shapes.iter().map(|d| Mlp::init(d, &mut rng)).collect();
        Ok(NeuralField { arch: arch.clone(), input_dim, seed, mlps, terms })
    }

    /// Same layout with all parameters zero (gradient accumulators).
    pub fn zeros_like(&self) -> Vec<Mlp> {
        self.mlps.iter().map(|m| Mlp::zeros(&m.dims)).collect()
    }

    pub fn n_params(&self) -> usize {
        self.mlps.iter().map(|m| m.n_params()).sum()
    }

    pub fn tape(&self, z: ArrayView2<f64>) -> Result<FieldTape> {
        check_dim(self.input_dim, z.ncols())?;
        let bsz = z.nrows();
        let mut values = Array1::zeros(bsz);
        let mut grads = Array2::zeros((bsz, self.input_dim));
        let mut groups = Vec::new();
        for (m, mlp) in self.mlps.iter().enumerate() {
            let terms: Vec<&Term> = self.terms.iter().filter(|t| t.mlp == m).collect();
            let nt = terms.len();
            let nf = mlp.input_dim();
            let mut x = Array2::zeros((bsz * nt, nf));
            let mut jac = Vec::with_capacity(bsz * nt * nf);
            for b in 0..bsz {
                let zr = z.row(b);
                let zs = zr.as_slice().map(std::borrow::Cow::Borrowed).unwrap_or_else(|| zr.to_vec().into());
                for (t, term) in terms.iter().enumerate() {
                    for (k, f) in term.features.iter().enumerate() {
                        let (v, j) = f.eval(&zs);
                        x[[b * nt + t, k]] = v;
                        jac.push(j);
                    }
                }
            }
            let cache = mlp.forward_grad(x.view());
            for b in 0..bsz {
                for t in 0..nt {
                    let row = b * nt + t;
                    values[b] += cache.values[row];
                    for k in 0..nf {
                        let g = cache.grads[[row, k]];
                        let j = &jac[row * nf + k];
                        for &(c, d) in &j.e[..j.n as usize] {
                            grads[[b, c]] += g * d;
                        }
                    }
                }
            }
            groups.push(Group { mlp: m, terms: nt, jac, cache });
        }
        Ok(FieldTape { values, grads, groups })
    }

    /// Accumulate into `acc` the parameter gradient given adjoints of the
    /// state gradients (`gbar`, one row per sample) and of the values.
    pub fn backward(&self, tape: &FieldTape, gbar: ArrayView2<f64>, hbar: Option<ndarray::ArrayView1<f64>>, acc: &mut [Mlp]) {
        let bsz = tape.values.len();
        for g in &tape.groups {
            let mlp = &self.mlps[g.mlp];
            let nf = mlp.input_dim();
            let mut fbar = Array2::zeros((bsz * g.terms, nf));
            for b in 0..bsz {
                for t in 0..g.terms {
                    let row = b * g.terms + t;
                    for k in 0..nf {
                        let j = &g.jac[row * nf + k];
                        fbar[[row, k]] = j.e[..j.n as usize].iter().map(|&(c, d)| d * gbar[[b, c]]).sum();
                    }
                }
            }
            let hb = hbar.map(|h| {
                let mut v = Array1::zeros(bsz * g.terms);
                for b in 0..bsz {
                    for t in 0..g.terms {
                        v[b * g.terms + t] = h[b];
                    }
                }
                v
            });
            mlp.backward(&g.cache, fbar.view(), hb.as_ref().map(|v| v.view()), &mut acc[g.mlp]);
        }
    }

    /// Values and state gradients for a batch.
    pub fn eval_batch(&self, z: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let t = self.tape(z)?;
        Ok((t.values, t.grads))
    }

    /// Values only (cheaper than [`eval_batch`](Self::eval_batch)).
    pub fn values(&self, z: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_dim(self.input_dim, z.ncols())?;
        let (v, _) = self.eval_batch(z)?;
        Ok(v)
    }

    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        let zz = ArrayView2::from_shape((1, z.len()), z).expect("row");
        check_dim(self.input_dim, z.len())?;
        Ok(self.eval_batch(zz)?.0[0])
    }

    pub fn grad_input(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, z.len())?;
        let zz = ArrayView2::from_shape((1, z.len()), z).expect("row");
        Ok(self.eval_batch(zz)?.1.row(0).to_vec())
    }

    /// Parameter gradient for per-sample value adjoints (loss = Σ_b hbar_b H(z_b)).
    pub fn grad_params_value(&self, z: ArrayView2<f64>, hbar: ndarray::ArrayView1<f64>) -> Result<Vec<Mlp>> {
        let tape = self.tape(z)?;
        let mut acc = self.zeros_like();
        let gbar = Array2::zeros((z.nrows(), self.input_dim));
        self.backward(&tape, gbar.view(), Some(hbar), &mut acc);
        Ok(acc)
    }
}
