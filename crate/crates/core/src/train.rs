//! Conservation loss, independence penalty and the Adam training loop.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Mlp, NeuralField};
use crate::systems::{SampleBatch, System};

/// Norms below this make a point degenerate; it is skipped.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Largest tolerated fraction of skipped points.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub split: f64,
    pub seed: u64,
    /// Stop once the train loss falls below this value (off by default).
    pub loss_threshold: Option<f64>,
    /// Points per split used for the per-epoch loss curves.
    pub eval_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda: 0.02,
            split: 0.5,
            seed: 0,
            loss_threshold: None,
            eval_points: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("train.{k}: {why}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be >= 0");
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad("split", "must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if self.eval_points == 0 {
            return bad("eval_points", "must be positive");
        }
        Ok(())
    }
}

/// Loss terms of an ensemble on a set of points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// ℓ(θ_i) for every net.
    pub per_net: Vec<f64>,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub skipped: usize,
}

/// Evaluate ℓ₁, ℓ₂ and ℓ = ℓ₁ + λℓ₂ from the flow `f` and per-net gradients
/// (rows are points). With `adjoint`, also returns ∂ℓ/∂(∇H_i) for every net.
pub fn ensemble_loss(
    f: ArrayView2<f64>,
    grads: &[ArrayView2<f64>],
    lambda: f64,
    adjoint: bool,
) -> Result<(LossParts, Vec<Array2<f64>>)> {
    let n = grads.len();
    let (p, s) = f.dim();
    if n == 0 || p == 0 {
        return Err(Error::Config("empty ensemble or batch".into()));
    }
    let mut unit = vec![vec![0.0; s]; n];
    let mut norms = vec![0.0; n];
    let mut fhat = vec![0.0; s];
    let mut c = vec![0.0; n];
    let mut per_net = vec![0.0; n];
    let mut pair_sum = 0.0;
    let mut adj: Vec<Array2<f64>> = if adjoint { (0..n).map(|_| Array2::zeros((p, s))).collect() } else { Vec::new() };
    let mut valid = Vec::with_capacity(p);
    let npairs = n * n.saturating_sub(1) / 2;
    let w1 = 1.0 / n as f64;
    let w2 = if npairs > 0 { lambda / npairs as f64 } else { 0.0 };
    let mut d = vec![0.0; n * n];
    for b in 0..p {
        let fr = f.row(b);
        let nf = fr.dot(&fr).sqrt();
        let mut ok = nf >= DEGENERATE_NORM && nf.is_finite();
        for i in 0..n {
            let g = grads[i].row(b);
            norms[i] = g.dot(&g).sqrt();
            ok &= norms[i] >= DEGENERATE_NORM && norms[i].is_finite();
        }
        if !ok {
            continue;
        }
        valid.push(b);
        for k in 0..s {
            fhat[k] = fr[k] / nf;
        }
        for i in 0..n {
            let g = grads[i].row(b);
            for k in 0..s {
                unit[i][k] = g[k] / norms[i];
            }
            c[i] = crate::linalg::dot(&fhat, &unit[i]);
            per_net[i] += c[i] * c[i];
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let v = crate::linalg::dot(&unit[i], &unit[j]);
                d[i * n + j] = v;
                d[j * n + i] = v;
                pair_sum += v * v;
            }
        }
        if adjoint {
            for i in 0..n {
                let mut row = adj[i].row_mut(b);
                let inv = 1.0 / norms[i];
                for k in 0..s {
                    let mut v = w1 * 2.0 * c[i] * (fhat[k] - c[i] * unit[i][k]);
                    for j in 0..n {
                        if j != i {
                            let dij = d[i * n + j];
                            v += w2 * 2.0 * dij * (unit[j][k] - dij * unit[i][k]);
                        }
                    }
                    row[k] = v * inv;
                }
            }
        }
    }
    let skipped = p - valid.len();
    if skipped as f64 > MAX_SKIP_FRACTION * p as f64 || valid.is_empty() {
        return Err(Error::Degenerate(format!("{skipped} of {p} points have vanishing |f| or |grad H|")));
    }
    let pv = valid.len() as f64;
    for v in &mut per_net {
        *v /= pv;
    }
    if adjoint {
        for a in &mut adj {
            *a /= pv;
        }
    }
    let l1 = per_net.iter().sum::<f64>() / n as f64;
    let l2 = if npairs > 0 { pair_sum / pv / npairs as f64 } else { 0.0 };
    Ok((LossParts { per_net, l1, l2, total: l1 + lambda * l2, skipped }, adj))
}

/// Mean squared cosine between f and one gradient field.
pub fn conservation_loss(f: ArrayView2<f64>, grad: ArrayView2<f64>) -> Result<f64> {
    Ok(ensemble_loss(f, &[grad], 0.0, false)?.0.l1)
}

/// Mean over pairs of the squared cosine between gradient fields (0 for one field).
pub fn independence_penalty(f: ArrayView2<f64>, grads: &[ArrayView2<f64>]) -> Result<f64> {
    Ok(ensemble_loss(f, grads, 0.0, false)?.0.l2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossParts,
    pub test: LossParts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub lambda: f64,
    pub epochs: Vec<EpochRecord>,
    /// Losses over the complete splits after training.
    pub final_train: LossParts,
    pub final_test: LossParts,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let n = self.final_train.per_net.len();
        let mut header = vec!["epoch", "l1", "l2", "l", "l1_test", "l2_test", "l_test"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        header.extend((0..n).map(|i| format!("l1_net{i}")));
        header.extend((0..n).map(|i| format!("l1_test_net{i}")));
        let rows = self.epochs.iter().map(|e| {
            let mut r = vec![e.train.l1, e.train.l2, e.train.total, e.test.l1, e.test.l2, e.test.total];
            r.extend(&e.train.per_net);
            r.extend(&e.test.per_net);
            (e.epoch, r)
        });
        crate::csvio::table(&header, rows.map(|(e, r)| (vec![e.to_string()], r)))
    }
}

/// Seed of net `i` of an ensemble.
pub fn net_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03u64.wrapping_mul(i as u64 + 1))
}

struct Adam {
    m: Vec<Mlp>,
    v: Vec<Mlp>,
    t: i32,
}

impl Adam {
    fn new(net: &NeuralField) -> Self {
        Adam { m: net.zeros_like(), v: net.zeros_like(), t: 0 }
    }

    fn step(&mut self, net: &mut NeuralField, grad: &[Mlp], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in net.mlps.iter_mut().zip(grad).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for (((ps, gs), ms), vs) in
                p.param_slices_mut().into_iter().zip(g.param_slices()).zip(m.param_slices_mut()).zip(v.param_slices_mut())
            {
                for k in 0..ps.len() {
                    let gk = gs[k];
                    ms[k] = cfg.beta1 * ms[k] + (1.0 - cfg.beta1) * gk;
                    vs[k] = cfg.beta2 * vs[k] + (1.0 - cfg.beta2) * gk * gk;
                    let mh = ms[k] / bc1;
                    let vh = vs[k] / bc2;
                    ps[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }
}

fn field_matrix(sys: &System, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut f = Array2::zeros(z.raw_dim());
    let rows: Vec<Result<Vec<f64>>> =
        (0..z.nrows()).into_par_iter().map(|i| sys.field(&z.row(i).to_vec())).collect();
    for (i, r) in rows.into_iter().enumerate() {
        f.row_mut(i).assign(&ndarray::ArrayView1::from(&r?));
    }
    Ok(f)
}

/// Loss of an ensemble on the given points.
pub fn evaluate(nets: &[NeuralField], z: ArrayView2<f64>, f: ArrayView2<f64>, lambda: f64) -> Result<LossParts> {
    let grads: Vec<Array2<f64>> =
        nets.par_iter().map(|n| n.eval_batch(z).map(|r| r.1)).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = grads.iter().map(|g| g.view()).collect();
    Ok(ensemble_loss(f, &views, lambda, false)?.0)
}

/// Train `n` networks of architecture `arch` on `batch` (split into train/test halves).
pub fn train(
    sys: &System,
    batch: &SampleBatch,
    n: usize,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<(Vec<NeuralField>, LossReport)> {
    cfg.validate()?;
    let s = sys.s();
    if n == 0 || n > s {
        return Err(Error::Config(format!("train.n must lie in 1..={s}, got {n}")));
    }
    if batch.points.ncols() != s {
        return Err(Error::Dimension { expected: s, got: batch.points.ncols() });
    }
    let p = batch.len();
    let n_train = ((p as f64) * cfg.split).round() as usize;
    if n_train == 0 || n_train >= p {
        return Err(Error::Config(format!("split {} leaves an empty side of {p} points", cfg.split)));
    }
    let z_all = batch.points.view();
    let f_all = field_matrix(sys, z_all)?;
    let (z_tr, z_te) = z_all.split_at(Axis(0), n_train);
    let (f_tr, f_te) = f_all.view().split_at(Axis(0), n_train);
    let ev_tr = cfg.eval_points.min(n_train);
    let ev_te = cfg.eval_points.min(p - n_train);

    let mut nets: Vec<NeuralField> =
        (0..n).map(|i| NeuralField::init(arch, s, net_seed(cfg.seed, i))).collect::<Result<_>>()?;
    let mut opt: Vec<Adam> = nets.iter().map(Adam::new).collect();
    let mut grads: Vec<Vec<Mlp>> = nets.iter().map(|n| n.zeros_like()).collect();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_BA7C4);
    let bs = cfg.batch_size.min(n_train);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut zb = Array2::zeros((bs, s));
    let mut fb = Array2::zeros((bs, s));

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(bs).enumerate() {
            if chunk.len() != zb.nrows() {
                zb = Array2::zeros((chunk.len(), s));
                fb = Array2::zeros((chunk.len(), s));
            }
            for (r, &i) in chunk.iter().enumerate() {
                zb.row_mut(r).assign(&z_tr.row(i));
                fb.row_mut(r).assign(&f_tr.row(i));
            }
            let tapes = nets.par_iter().map(|n| n.tape(zb.view())).collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = tapes.iter().map(|t| t.grads.view()).collect();
            let (parts, adj) = ensemble_loss(fb.view(), &views, cfg.lambda, true)?;
            if !parts.total.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            nets.par_iter().zip(tapes.par_iter()).zip(adj.par_iter()).zip(grads.par_iter_mut()).for_each(
                |(((net, tape), a), g)| {
                    g.iter_mut().for_each(|m| m.fill_zero());
                    net.backward(tape, a.view(), None, g);
                },
            );
            for ((net, g), o) in nets.iter_mut().zip(&grads).zip(opt.iter_mut()) {
                o.step(net, g, cfg);
            }
        }
        let train = evaluate(&nets, z_tr.slice(ndarray::s![..ev_tr, ..]), f_tr.slice(ndarray::s![..ev_tr, ..]), cfg.lambda)?;
        let test = evaluate(&nets, z_te.slice(ndarray::s![..ev_te, ..]), f_te.slice(ndarray::s![..ev_te, ..]), cfg.lambda)?;
        if !train.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss after epoch {epoch}")));
        }
        let stop = cfg.loss_threshold.is_some_and(|t| train.total < t);
        epochs.push(EpochRecord { epoch, train, test });
        if stop {
            break;
        }
    }
    let final_train = evaluate(&nets, z_tr, f_tr, cfg.lambda)?;
    let final_test = evaluate(&nets, z_te, f_te, cfg.lambda)?;
    Ok((nets, LossReport { lambda: cfg.lambda, epochs, final_train, final_test }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub lambdas: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub per_net: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let header = ["lambda", "l1", "l2"].map(String::from);
        let rows = (0..self.lambdas.len()).map(|k| (vec![], vec![self.lambdas[k], self.l1[k], self.l2[k]]));
        crate::csvio::table(&header, rows)
    }
}

/// Independent training runs over a strictly increasing λ grid.
pub fn lambda_sweep(
    sys: &System,
    batch: &SampleBatch,
    n: usize,
    arch: &ArchSpec,
    grid: &[f64],
    cfg: &TrainConfig,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("sweep.lambdas must not be empty".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("sweep.lambdas must be strictly increasing".into()));
    }
    let mut out = SweepResult { lambdas: grid.to_vec(), l1: vec![], l2: vec![], per_net: vec![] };
    for (k, &lam) in grid.iter().enumerate() {
        let c = TrainConfig { lambda: lam, seed: net_seed(cfg.seed, 1000 + k), ..cfg.clone() };
        let (_, rep) = train(sys, batch, n, arch, &c)?;
        out.l1.push(rep.final_train.l1);
        out.l2.push(rep.final_train.l2);
        out.per_net.push(rep.final_train.per_net.clone());
    }
    Ok(out)
}

/// Largest relative train/test gap over the last ten recorded epochs.
pub fn overfit_check(report: &LossReport) -> Result<f64> {
    if report.epochs.is_empty() {
        return Err(Error::MissingArtifact("loss report has no epochs".into()));
    }
    let start = report.epochs.len().saturating_sub(10);
    let mut gap: f64 = 0.0;
    for e in &report.epochs[start..] {
        if !e.test.total.is_finite() || e.test.per_net.is_empty() {
            return Err(Error::MissingArtifact("loss report lacks test-split losses".into()));
        }
        let denom = e.train.total;
        let g = if denom > 0.0 { (e.test.total - denom).abs() / denom } else if e.test.total == 0.0 { 0.0 } else { f64::INFINITY };
        gap = gap.max(g);
    }
    Ok(gap)
}
