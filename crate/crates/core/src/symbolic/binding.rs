//! Binding of grammar variables to state coordinates. A formula h bound to
//! several terms denotes H(z) = Σ_t h(inputs of term t).

use std::sync::Arc;

use super::eval;
use super::grammar::{Formula, Grammar, MAX_VARS};
use crate::error::{Error, Result};
use crate::rank::ScalarFn;
use crate::systems::{Kind, System};

#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    pub vars: Vec<String>,
    /// `terms[t][k]` = (coordinate, take absolute value) feeding variable k.
    pub terms: Vec<Vec<(usize, bool)>>,
    pub s: usize,
}

impl Binding {
    fn checked(self) -> Result<Binding> {
        if self.vars.is_empty() || self.vars.len() > MAX_VARS {
            return Err(Error::Config(format!("binding needs 1..={MAX_VARS} variables")));
        }
        let mut seen = vec![false; self.s];
        for t in &self.terms {
            if t.len() != self.vars.len() {
                return Err(Error::Config("binding term arity mismatch".into()));
            }
            for &(c, _) in t {
                if c >= self.s || std::mem::replace(&mut seen[c], true) {
                    return Err(Error::Config(format!("binding coordinate {c} out of range or reused")));
                }
            }
        }
        Ok(self)
    }

    /// Every coordinate is a variable, one term.
    pub fn direct(sys: &System) -> Result<Binding> {
        Binding { vars: sys.labels().to_vec(), terms: vec![(0..sys.s()).map(|c| (c, false)).collect()], s: sys.s() }
            .checked()
    }

    /// Three-body: per-body variables x, y, p_x, p_y plus r = r_{i,i+1}
    /// (cyclic), summed over bodies.
    pub fn cyclic_bodies(sys: &System) -> Result<Binding> {
        if !matches!(sys.kind(), Kind::ThreeBody { .. }) || !sys.is_augmented() {
            return Err(Error::Config("per-body binding needs the augmented three-body system".into()));
        }
        // Pair columns: r12 = 12, r13 = 13, r23 = 14; cyclic pairs (1,2), (2,3), (3,1).
        let cyc = [12, 14, 13];
        let terms = (0..3).map(|i| {
            let mut t: Vec<(usize, bool)> = (0..4).map(|k| (4 * i + k, false)).collect();
            t.push((cyc[i], false));
            t
        });
        Binding {
            vars: ["x", "y", "p_x", "p_y", "r"].map(String::from).to_vec(),
            terms: terms.collect(),
            s: sys.s(),
        }
        .checked()
    }

    /// PDE: the first `n_features` per-point features, summed over the grid.
    pub fn integral(sys: &System, n_features: usize) -> Result<Binding> {
        let (stride, feats) =
            sys.pde_layout().ok_or_else(|| Error::Config(format!("{} is not a field theory", sys.name())))?;
        if n_features == 0 || n_features > feats.len() {
            return Err(Error::Config(format!("search.pde_features must lie in 1..={}", feats.len())));
        }
        let n_points = sys.s() / stride;
        let terms =
            (0..n_points).map(|p| feats[..n_features].iter().map(|(_, off, abs)| (p * stride + off, *abs)).collect());
        Binding { vars: feats[..n_features].iter().map(|f| f.0.clone()).collect(), terms: terms.collect(), s: sys.s() }
            .checked()
    }

    /// False for systems the search only handles through their augmented
    /// variant.
    pub fn has_default(sys: &System) -> bool {
        !matches!(sys.kind(), Kind::ThreeBody { .. }) || sys.is_augmented()
    }

    /// Default binding used by the search for each system.
    pub fn for_system(sys: &System, pde_features: usize) -> Result<Binding> {
        match sys.kind() {
            Kind::ThreeBody { .. } if sys.is_augmented() => Self::cyclic_bodies(sys),
            Kind::ThreeBody { .. } => Err(Error::Config("symbolic search runs on threebody-aug".into())),
            Kind::Kdv(_) | Kind::Nls { .. } => Self::integral(sys, pde_features),
            _ => Self::direct(sys),
        }
    }

    #[inline]
    pub fn inputs(&self, z: &[f64], t: usize, out: &mut [f64]) {
        for (k, &(c, abs)) in self.terms[t].iter().enumerate() {
            out[k] = if abs { z[c].abs() } else { z[c] };
        }
    }

    #[inline]
    pub fn sign(z: &[f64], c: usize, abs: bool) -> f64 {
        if abs && z[c] < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

/// A formula bound to state coordinates.
#[derive(Clone, Debug)]
pub struct BoundFormula {
    pub formula: Formula,
    pub binding: Arc<Binding>,
}

impl BoundFormula {
    pub fn new(formula: Formula, binding: Arc<Binding>) -> Self {
        BoundFormula { formula, binding }
    }

    pub fn parse(g: &Grammar, text: &str, binding: Arc<Binding>) -> Result<Self> {
        Ok(BoundFormula { formula: g.parse(text)?, binding })
    }

    pub fn value(&self, z: &[f64]) -> Option<f64> {
        self.eval_grad(z).map(|r| r.0)
    }
}

impl ScalarFn for BoundFormula {
    fn eval_grad(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        let b = &*self.binding;
        let mut g = vec![0.0; b.s];
        let mut v = 0.0;
        let mut inp = [0.0; MAX_VARS];
        let nv = b.vars.len();
        for t in 0..b.terms.len() {
            b.inputs(z, t, &mut inp[..nv]);
            let d = eval::eval(&self.formula.tokens, &inp[..nv])?;
            v += d.v;
            for (k, &(c, abs)) in b.terms[t].iter().enumerate() {
                g[c] += d.g[k] * Binding::sign(z, c, abs);
            }
        }
        Some((v, g))
    }
}

/// H = Σ_grid h for a formula over PDE features.
pub fn integral_wrap(g: &Grammar, text: &str, sys: &System) -> Result<BoundFormula> {
    let b = Binding::integral(sys, g.vars.len())?;
    if b.vars != g.vars {
        return Err(Error::Config("formula grammar does not match the PDE features".into()));
    }
    BoundFormula::parse(g, text, Arc::new(b))
}
