//! Forward-mode evaluation of RPN formulas over at most [`MAX_VARS`]
//! variables. Domain violations yield a NaN value (inapplicable).

use super::grammar::{BinOp, Token, UnOp, MAX_VARS};

/// Smallest admissible |denominator|.
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct D {
    pub v: f64,
    pub g: [f64; MAX_VARS],
}

impl D {
    pub const NAN: D = D { v: f64::NAN, g: [f64::NAN; MAX_VARS] };

    pub fn var(v: f64, i: usize) -> D {
        let mut g = [0.0; MAX_VARS];
        g[i] = 1.0;
        D { v, g }
    }

    pub fn cst(v: f64) -> D {
        D { v, g: [0.0; MAX_VARS] }
    }

    #[inline]
    fn chain(&self, v: f64, d: f64, nv: usize) -> D {
        let mut g = [0.0; MAX_VARS];
        for k in 0..nv {
            g[k] = self.g[k] * d;
        }
        D { v, g }
    }
}

#[inline]
pub fn unary(u: UnOp, a: &D, nv: usize) -> D {
    let x = a.v;
    match u {
        UnOp::Square => a.chain(x * x, 2.0 * x, nv),
        UnOp::Sqrt => {
            if !(x > 0.0) {
                return D::NAN;
            }
            let r = x.sqrt();
            a.chain(r, 0.5 / r, nv)
        }
        UnOp::Recip => {
            if !(x.abs() >= DIV_GUARD) {
                return D::NAN;
            }
            let r = 1.0 / x;
            a.chain(r, -r * r, nv)
        }
        UnOp::Double => a.chain(2.0 * x, 2.0, nv),
        UnOp::Halve => a.chain(0.5 * x, 0.5, nv),
        UnOp::Neg => a.chain(-x, -1.0, nv),
        UnOp::Log => {
            if !(x > 0.0) {
                return D::NAN;
            }
            a.chain(x.ln(), 1.0 / x, nv)
        }
        UnOp::Atan => a.chain(x.atan(), 1.0 / (1.0 + x * x), nv),
    }
}

#[inline]
pub fn binary(b: BinOp, a: &D, c: &D, nv: usize) -> D {
    let mut g = [0.0; MAX_VARS];
    let v = match b {
        BinOp::Add => {
            for k in 0..nv {
                g[k] = a.g[k] + c.g[k];
            }
            a.v + c.v
        }
        BinOp::Sub => {
            for k in 0..nv {
                g[k] = a.g[k] - c.g[k];
            }
            a.v - c.v
        }
        BinOp::Mul => {
            for k in 0..nv {
                g[k] = a.g[k] * c.v + a.v * c.g[k];
            }
            a.v * c.v
        }
        BinOp::Div => {
            if !(c.v.abs() >= DIV_GUARD) {
                return D::NAN;
            }
            let inv = 1.0 / c.v;
            let q = a.v * inv;
            for k in 0..nv {
                g[k] = (a.g[k] - q * c.g[k]) * inv;
            }
            q
        }
    };
    D { v, g }
}

/// Value and gradient with respect to `vars`; `None` when inapplicable.
pub fn eval(tokens: &[Token], vars: &[f64]) -> Option<D> {
    let nv = vars.len();
    let mut st: Vec<D> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let d = match t {
            Token::Var(i) => D::var(vars[i as usize], i as usize),
            Token::Lit(k) => D::cst(k as f64),
            Token::Un(u) => {
                let a = st.pop()?;
                unary(u, &a, nv)
            }
            Token::Bin(b) => {
                let c = st.pop()?;
                let a = st.pop()?;
                binary(b, &a, &c, nv)
            }
        };
        if !d.v.is_finite() {
            return None;
        }
        st.push(d);
    }
    let r = st.pop()?;
    (st.is_empty() && r.g[..nv].iter().all(|x| x.is_finite())).then_some(r)
}
