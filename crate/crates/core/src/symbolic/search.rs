//! Complexity-ordered brute-force search with fast rejection.
//!
//! Enumeration walks templates with an odometer over token choices. Operand
//! slots of a template are fixed, so the value stack of a formula is a set of
//! per-position slots; when the odometer advances only the slots from the
//! first changed position onward are recomputed, and only at the test points
//! that the current candidate actually reaches.

use std::sync::Arc;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::binding::{Binding, BoundFormula};
use super::eval::{self, D};
use super::grammar::{templates, BinOp, Formula, Grammar, Odometer, Token, UnOp, MAX_VARS};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rank::{self, Projected, ScalarFn};
use crate::systems::System;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub max_len: usize,
    /// Maximum number of formulas to enumerate.
    pub budget: Option<u64>,
    pub target_count: Option<usize>,
    pub n_test: usize,
    pub eps_s: f64,
    pub seed: u64,
    /// Batch rows used for full verification.
    pub verify_points: usize,
    pub literals: bool,
    /// Unary glyphs in enumeration order (default "QRIOoNLT").
    pub unary: String,
    /// Binary glyphs in enumeration order (default "+-*/").
    pub binary: String,
    /// Per-point features exposed for PDE systems.
    pub pde_features: usize,
    /// How many dependent formulas to record.
    pub dependent_log: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_len: 9,
            budget: None,
            target_count: None,
            n_test: 10,
            eps_s: 1e-4,
            seed: 0,
            verify_points: 1000,
            literals: false,
            unary: "QRIOoNLT".into(),
            binary: "+-*/".into(),
            pde_features: 3,
            dependent_log: 4096,
        }
    }
}

impl SearchConfig {
    pub fn grammar(&self, binding: &Binding) -> Result<Grammar> {
        let unary = self
            .unary
            .chars()
            .map(|c| UnOp::from_glyph(c).ok_or_else(|| Error::Config(format!("search.unary: unknown operator '{c}'"))))
            .collect::<Result<Vec<_>>>()?;
        let binary = self
            .binary
            .chars()
            .map(|c| BinOp::from_glyph(c).ok_or_else(|| Error::Config(format!("search.binary: unknown operator '{c}'"))))
            .collect::<Result<Vec<_>>>()?;
        let g = Grammar { vars: binding.vars.clone(), unary, binary, literals: self.literals, max_len: self.max_len };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_test == 0 {
            return Err(Error::Config("search.n_test must be positive".into()));
        }
        if !(self.eps_s > 0.0 && self.eps_s < 1.0) {
            return Err(Error::Config("search.eps_s must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub enumerated: u64,
    pub fast_rejected: u64,
    pub fully_rejected: u64,
    pub duplicate_rejected: u64,
    /// Includes formulas whose gradient lies in the span of the accepted
    /// ones at every test point; those skip full verification.
    pub dependent_rejected: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormulaStats {
    pub rpn: String,
    pub infix: String,
    pub template: String,
    pub length: usize,
    /// Position in the enumeration stream (0-based).
    pub index: u64,
    pub max_residual: f64,
    pub mean_residual: f64,
    #[serde(default)]
    pub max_cancellation: f64,
    pub inapplicable: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchState {
    pub system: String,
    pub vars: Vec<String>,
    pub max_len: usize,
    pub accepted: Vec<FormulaStats>,
    /// Conserved formulas rejected as functions of accepted ones (bounded log).
    pub dependent: Vec<String>,
    pub counters: Counters,
    pub complete: bool,
    pub stop_reason: String,
    #[serde(skip)]
    pub accepted_formulas: Vec<BoundFormula>,
}

/// Residual statistics of a formula over many points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyStats {
    pub evaluated: usize,
    pub inapplicable: usize,
    pub degenerate: usize,
    pub max_residual: f64,
    pub mean_residual: f64,
    /// max |Σ f_k ∂_kH| / Σ |f_k ∂_kH|: small only when dH/dt vanishes by
    /// cancellation, not because ∇H sits where the flow is negligible.
    #[serde(default)]
    pub max_cancellation: f64,
    pub accepted: bool,
}

fn as_scalar<'a>(sys: &'a System, f: &'a BoundFormula) -> Box<dyn ScalarFn + 'a> {
    if sys.is_augmented() {
        Box::new(Projected { inner: f, sys })
    } else {
        Box::new(f.clone())
    }
}

/// Residuals at every row; accepted iff all usable rows are below `eps_s` in
/// both the residual and the cancellation ratio, and at most half the rows
/// are inapplicable.
pub fn full_verify(fm: &BoundFormula, sys: &System, points: ArrayView2<f64>, eps_s: f64) -> VerifyStats {
    let mut st = VerifyStats { evaluated: points.nrows(), ..Default::default() };
    let mut sum = 0.0;
    let mut used = 0;
    for r in points.rows() {
        let z = r.to_vec();
        let Some((_, g)) = fm.eval_grad(&z) else {
            st.inapplicable += 1;
            continue;
        };
        match sys.residual(&z, &g) {
            Ok(res) => {
                st.max_residual = st.max_residual.max(res);
                st.max_cancellation = st.max_cancellation.max(cancellation(sys, &z, g));
                sum += res;
                used += 1;
            }
            Err(_) => st.degenerate += 1,
        }
    }
    st.mean_residual = if used > 0 { sum / used as f64 } else { f64::NAN };
    st.accepted = used > 0
        && 2 * st.inapplicable <= st.evaluated
        && st.max_residual < eps_s
        && st.max_cancellation < eps_s;
    st
}

fn cancellation(sys: &System, z: &[f64], mut g: Vec<f64>) -> f64 {
    let Ok(f) = sys.field(z) else { return 0.0 };
    sys.project_tangent(z, &mut g);
    let (mut net, mut gross) = (0.0, 0.0);
    for (a, b) in f.iter().zip(&g) {
        net += a * b;
        gross += (a * b).abs();
    }
    if gross > 0.0 { net.abs() / gross } else { 0.0 }
}

/// True when the formula is rejected at the test points.
pub fn fast_reject(fm: &BoundFormula, sys: &System, test_points: ArrayView2<f64>, eps_s: f64) -> bool {
    let np = test_points.nrows();
    let mut inapp = 0;
    let mut passed = 0;
    for r in test_points.rows() {
        let z = r.to_vec();
        let Some((_, g)) = fm.eval_grad(&z) else {
            inapp += 1;
            if 2 * inapp > np {
                return true;
            }
            continue;
        };
        let mut pg = g.clone();
        sys.project_tangent(&z, &mut pg);
        if linalg::norm(&pg) < 1e-10 {
            continue;
        }
        match sys.residual(&z, &g) {
            Ok(res) if res.max(cancellation(sys, &z, g)) > eps_s => return true,
            Ok(_) => passed += 1,
            Err(_) => {}
        }
    }
    passed == 0
}

/// Precomputed per-test-point coefficients for the slot engine.
struct TestPoint {
    inputs: Vec<f64>,
    /// sign·f̂ at the coordinate feeding (term, var).
    fs: Vec<f64>,
    /// sign·q at the coordinate feeding (term, var), per constraint normal.
    qs: Vec<Vec<f64>>,
    /// (coordinate, sign) feeding (term, var).
    coords: Vec<(usize, f64)>,
}

/// Orthonormal bases at a test point: constraint normals alone, and normals
/// followed by the accepted gradients.
struct Span {
    normals: Vec<Vec<f64>>,
    full: Vec<Vec<f64>>,
}

struct Engine<'a> {
    nv: usize,
    nt: usize,
    pts: &'a [TestPoint],
    slots: Vec<D>,
    valid: Vec<usize>,
    args: Vec<(usize, usize)>,
    toks: Vec<Token>,
    s: usize,
    spans: Vec<Option<Span>>,
}

enum PointOutcome {
    Inapplicable,
    ZeroGradient,
    Residual(f64),
}

impl<'a> Engine<'a> {
    fn new(nv: usize, nt: usize, max_len: usize, s: usize, pts: &'a [TestPoint]) -> Self {
        Engine {
            nv,
            nt,
            pts,
            slots: vec![D::NAN; max_len * pts.len() * nt],
            valid: vec![0; pts.len()],
            args: Vec::new(),
            toks: Vec::new(),
            s,
            spans: Vec::new(),
        }
    }

    /// Rebuild the per-point spans of normals and accepted gradients, as
    /// Method B would at these points.
    fn set_known(&mut self, sys: &System, test_z: ArrayView2<f64>, known: &[Box<dyn ScalarFn + '_>]) {
        self.spans = test_z
            .rows()
            .into_iter()
            .map(|r| {
                let z = r.to_vec();
                let normals = sys.constraint_normals(&z);
                let mut all = normals.clone();
                for k in known {
                    let (_, g) = k.eval_grad(&z)?;
                    let n = linalg::norm(&g);
                    if !(n >= 1e-12 && n.is_finite()) {
                        return None;
                    }
                    all.push(g.iter().map(|x| x / n).collect());
                }
                Some(Span { normals: linalg::orthonormalize(&normals, 1e-10), full: linalg::orthonormalize(&all, 1e-10) })
            })
            .collect();
    }

    /// True when, at every test point, the current formula's unit gradient
    /// lies within `eps_i / 2` of the span of normals and accepted
    /// gradients. Method B is then bound to call it dependent. Assumes the
    /// formula has just passed [`Engine::rejects`], so all slots are current.
    fn in_known_span(&self, eps_i: f64) -> bool {
        if self.spans.is_empty() {
            return false;
        }
        let np = self.pts.len();
        let (nt, nv) = (self.nt, self.nv);
        let last = self.toks.len() - 1;
        let mut g = vec![0.0; self.s];
        for p in 0..np {
            let Some(span) = &self.spans[p] else { return false };
            if span.full.len() >= self.s {
                return false;
            }
            g.iter_mut().for_each(|x| *x = 0.0);
            let off = (last * np + p) * nt;
            for t in 0..nt {
                let d = &self.slots[off + t];
                if !d.v.is_finite() {
                    return false;
                }
                for k in 0..nv {
                    let (c, sg) = self.pts[p].coords[t * nv + k];
                    g[c] += d.g[k] * sg;
                }
            }
            let gp = linalg::norm(&linalg::orthogonal_residual(&g, &span.normals));
            if !(gp >= 1e-12 && gp.is_finite()) {
                return false;
            }
            if linalg::norm(&linalg::orthogonal_residual(&g, &span.full)) >= 0.5 * eps_i * gp {
                return false;
            }
        }
        true
    }

    fn set_template(&mut self, tpl: &[u8]) {
        let mut st = Vec::new();
        self.args.clear();
        for (i, &a) in tpl.iter().enumerate() {
            let arg = match a {
                0 => (0, 0),
                1 => (st.pop().expect("valid template"), 0),
                _ => {
                    let b = st.pop().expect("valid template");
                    let a = st.pop().expect("valid template");
                    (a, b)
                }
            };
            st.push(i);
            self.args.push(arg);
        }
        self.valid.iter_mut().for_each(|v| *v = 0);
    }

    fn invalidate_from(&mut self, pos: usize) {
        for v in &mut self.valid {
            *v = (*v).min(pos);
        }
    }

    fn compute(&mut self, p: usize) {
        let np = self.pts.len();
        let (nt, nv) = (self.nt, self.nv);
        for i in self.valid[p]..self.toks.len() {
            let off = (i * np + p) * nt;
            let (a, b) = self.args[i];
            let (ao, bo) = ((a * np + p) * nt, (b * np + p) * nt);
            match self.toks[i] {
                Token::Var(k) => {
                    let inp = &self.pts[p].inputs;
                    for t in 0..nt {
                        self.slots[off + t] = D::var(inp[t * nv + k as usize], k as usize);
                    }
                }
                Token::Lit(c) => {
                    for t in 0..nt {
                        self.slots[off + t] = D::cst(c as f64);
                    }
                }
                Token::Un(u) => {
                    for t in 0..nt {
                        let x = self.slots[ao + t];
                        self.slots[off + t] = eval::unary(u, &x, nv);
                    }
                }
                Token::Bin(op) => {
                    for t in 0..nt {
                        let (x, y) = (self.slots[ao + t], self.slots[bo + t]);
                        self.slots[off + t] = eval::binary(op, &x, &y, nv);
                    }
                }
            }
        }
        self.valid[p] = self.toks.len();
    }

    fn outcome(&mut self, p: usize) -> PointOutcome {
        self.compute(p);
        let np = self.pts.len();
        let (nt, nv) = (self.nt, self.nv);
        let off = ((self.toks.len() - 1) * np + p) * nt;
        let tp = &self.pts[p];
        let mut num = 0.0;
        let mut gross = 0.0;
        let mut gn2 = 0.0;
        let mut qd = [0.0f64; 3];
        for t in 0..nt {
            let d = &self.slots[off + t];
            if !d.v.is_finite() {
                return PointOutcome::Inapplicable;
            }
            for k in 0..nv {
                let g = d.g[k];
                let idx = t * nv + k;
                num += g * tp.fs[idx];
                gross += (g * tp.fs[idx]).abs();
                gn2 += g * g;
                for (j, q) in tp.qs.iter().enumerate() {
                    qd[j] += g * q[idx];
                }
            }
        }
        if !gn2.is_finite() {
            return PointOutcome::Inapplicable;
        }
        let pg2 = gn2 - qd[..tp.qs.len()].iter().map(|x| x * x).sum::<f64>();
        if pg2 < 1e-20 || pg2 < 1e-14 * gn2 {
            return PointOutcome::ZeroGradient;
        }
        // Without constraint normals Σ|g·f| over (term, var) bounds the
        // per-coordinate gross sum from above, so this never overstates the
        // cancellation ratio full verification computes.
        let cancel = if tp.qs.is_empty() && gross > 0.0 { num.abs() / gross } else { 0.0 };
        PointOutcome::Residual((num.abs() / pg2.sqrt()).max(cancel))
    }

    /// Fast rejection of the current formula.
    fn rejects(&mut self, eps_s: f64) -> bool {
        let np = self.pts.len();
        let mut inapp = 0;
        let mut passed = 0;
        for p in 0..np {
            match self.outcome(p) {
                PointOutcome::Inapplicable => {
                    inapp += 1;
                    if 2 * inapp > np {
                        return true;
                    }
                }
                PointOutcome::ZeroGradient => {}
                PointOutcome::Residual(r) => {
                    if r > eps_s {
                        return true;
                    }
                    passed += 1;
                }
            }
        }
        passed == 0
    }
}

fn test_points(sys: &System, binding: &Binding, n: usize, seed: u64) -> Result<(ndarray::Array2<f64>, Vec<TestPoint>)> {
    let batch = sys.sample(n, seed)?;
    let nv = binding.vars.len();
    let mut out = Vec::new();
    for r in batch.points.rows() {
        let z = r.to_vec();
        let f = sys.field(&z)?;
        let nf = linalg::norm(&f);
        if nf < 1e-12 {
            return Err(Error::Degenerate("test point with vanishing flow".into()));
        }
        let basis = linalg::orthonormalize(&sys.constraint_normals(&z), 1e-14);
        if basis.len() > 3 {
            return Err(Error::Unsupported("more than three augmentation constraints".into()));
        }
        let mut tp =
            TestPoint { inputs: vec![0.0; binding.terms.len() * nv], fs: vec![], qs: vec![vec![]; basis.len()], coords: vec![] };
        for (t, term) in binding.terms.iter().enumerate() {
            binding.inputs(&z, t, &mut tp.inputs[t * nv..(t + 1) * nv]);
            for &(c, abs) in term {
                let sg = Binding::sign(&z, c, abs);
                tp.coords.push((c, sg));
                tp.fs.push(sg * f[c] / nf);
                for (j, q) in basis.iter().enumerate() {
                    tp.qs[j].push(sg * q[c]);
                }
            }
        }
        out.push(tp);
    }
    Ok((batch.points, out))
}

fn probe_signature(f: &BoundFormula, probes: ArrayView2<f64>) -> Option<Vec<f64>> {
    let v: Vec<f64> = probes.rows().into_iter().map(|r| f.value(&r.to_vec())).collect::<Option<_>>()?;
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let n = linalg::norm(&c);
    (n > 1e-300).then(|| c.iter().map(|x| x / n).collect())
}

fn same_up_to_affine(a: &[f64], b: &[f64]) -> bool {
    let tol = 1e-9;
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol) || a.iter().zip(b).all(|(x, y)| (x + y).abs() < tol)
}

/// Enumerate, fast-reject, verify and accept independent conserved formulas.
pub fn search(sys: &System, grammar: &Grammar, binding: Arc<Binding>, batch: ArrayView2<f64>, cfg: &SearchConfig) -> Result<SearchState> {
    cfg.validate()?;
    grammar.validate()?;
    if grammar.vars != binding.vars {
        return Err(Error::Config("grammar variables do not match the binding".into()));
    }
    if batch.ncols() != sys.s() {
        return Err(Error::Dimension { expected: sys.s(), got: batch.ncols() });
    }
    let mut state = SearchState {
        system: sys.name(),
        vars: grammar.vars.clone(),
        max_len: grammar.max_len,
        accepted: Vec::new(),
        dependent: Vec::new(),
        counters: Counters::default(),
        complete: true,
        stop_reason: "exhausted".into(),
        accepted_formulas: Vec::new(),
    };
    if cfg.target_count == Some(0) {
        state.stop_reason = "target".into();
        return Ok(state);
    }
    let (test_z, pts) = test_points(sys, &binding, cfg.n_test, cfg.seed ^ 0x7E57_90B1_u64)?;
    let verify = batch.slice(ndarray::s![..cfg.verify_points.min(batch.nrows()), ..]);
    let probes = batch.slice(ndarray::s![..32.min(batch.nrows()), ..]);
    let mut signatures: Vec<Vec<f64>> = Vec::new();
    let nv = grammar.vars.len();
    let mut engine = Engine::new(nv, binding.terms.len(), grammar.max_len, sys.s(), &pts);
    let mut index: u64 = 0;

    'outer: for len in 1..=grammar.max_len {
        for tpl in templates(len) {
            let choices: Vec<Vec<Token>> = tpl.iter().map(|&a| grammar.choices(a)).collect();
            let mut odo = Odometer::new(choices);
            if odo.is_done() {
                continue;
            }
            engine.set_template(&tpl);
            engine.toks = odo.current();
            loop {
                if cfg.budget.is_some_and(|b| index >= b) {
                    state.complete = false;
                    state.stop_reason = "budget".into();
                    break 'outer;
                }
                state.counters.enumerated += 1;
                let this = index;
                index += 1;
                if engine.rejects(cfg.eps_s) {
                    state.counters.fast_rejected += 1;
                } else if engine.in_known_span(rank::EPS_I) {
                    // Dependent at every test point: no need to verify.
                    state.counters.dependent_rejected += 1;
                    if state.dependent.len() < cfg.dependent_log {
                        state.dependent.push(Formula { tokens: engine.toks.clone() }.rpn(grammar));
                    }
                } else {
                    let fm = BoundFormula::new(Formula { tokens: engine.toks.clone() }, binding.clone());
                    let vs = full_verify(&fm, sys, verify, cfg.eps_s);
                    if !vs.accepted {
                        state.counters.fully_rejected += 1;
                    } else {
                        let sig = probe_signature(&fm, probes);
                        let dup = sig.as_ref().is_none_or(|s| signatures.iter().any(|u| same_up_to_affine(s, u)));
                        let dependent = dup || {
                            let known: Vec<Box<dyn ScalarFn + '_>> =
                                state.accepted_formulas.iter().map(|a| as_scalar(sys, a)).collect();
                            let refs: Vec<&dyn ScalarFn> = known.iter().map(|b| b.as_ref()).collect();
                            let cand = as_scalar(sys, &fm);
                            let seed = cfg.seed ^ (0xB0B0 + state.accepted.len() as u64);
                            !rank::is_independent(&refs, cand.as_ref(), test_z.view(), verify, seed)?
                        };
                        let rpn = fm.formula.rpn(grammar);
                        if dependent {
                            if dup {
                                state.counters.duplicate_rejected += 1;
                            } else {
                                state.counters.dependent_rejected += 1;
                            }
                            if state.dependent.len() < cfg.dependent_log {
                                state.dependent.push(rpn);
                            }
                        } else {
                            state.accepted.push(FormulaStats {
                                infix: fm.formula.infix(grammar),
                                template: fm.formula.template(),
                                length: fm.formula.len(),
                                index: this,
                                max_residual: vs.max_residual,
                                mean_residual: vs.mean_residual,
                                max_cancellation: vs.max_cancellation,
                                inapplicable: vs.inapplicable,
                                rpn,
                            });
                            signatures.push(sig.expect("checked"));
                            state.accepted_formulas.push(fm);
                            let known: Vec<Box<dyn ScalarFn + '_>> =
                                state.accepted_formulas.iter().map(|a| as_scalar(sys, a)).collect();
                            engine.set_known(sys, test_z.view(), &known);
                            if cfg.target_count.is_some_and(|t| state.accepted.len() >= t) {
                                state.stop_reason = "target".into();
                                break 'outer;
                            }
                        }
                    }
                }
                match odo.advance() {
                    Some(pos) => {
                        engine.invalidate_from(pos);
                        for i in pos..len {
                            engine.toks[i] = odo.token(i);
                        }
                    }
                    None => break,
                }
            }
        }
    }
    Ok(state)
}

/// Rows of `points` as a matrix view helper for callers holding a batch.
pub fn rows(points: &ndarray::Array2<f64>, n: usize) -> ArrayView2<'_, f64> {
    points.slice_axis(Axis(0), ndarray::Slice::from(..n.min(points.nrows())))
}

/// Standard grammar for a binding with all operators.
pub fn standard_grammar(binding: &Binding, max_len: usize) -> Grammar {
    let mut g = Grammar::standard(&binding.vars);
    g.max_len = max_len;
    debug_assert!(g.vars.len() <= MAX_VARS);
    g
}
