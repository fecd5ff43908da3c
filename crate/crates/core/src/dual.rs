//! Forward-mode dual numbers with a dense gradient, used for analytic
//! conserved quantities where exact gradients are needed but speed is not.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub g: Vec<f64>,
}

impl Dual {
    pub fn var(v: f64, i: usize, n: usize) -> Self {
        let mut g = vec![0.0; n];
        g[i] = 1.0;
        Dual { v, g }
    }

    pub fn cst(v: f64, n: usize) -> Self {
        Dual { v, g: vec![0.0; n] }
    }

    /// Independent variables for every entry of `z`.
    pub fn vars(z: &[f64]) -> Vec<Dual> {
        z.iter().enumerate().map(|(i, &v)| Dual::var(v, i, z.len())).collect()
    }

    fn chain(&self, v: f64, d: f64) -> Self {
        Dual { v, g: self.g.iter().map(|x| x * d).collect() }
    }

    pub fn sqr(&self) -> Self {
        self.chain(self.v * self.v, 2.0 * self.v)
    }

    pub fn powi(&self, k: i32) -> Self {
        self.chain(self.v.powi(k), k as f64 * self.v.powi(k - 1))
    }

    pub fn sqrt(&self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, 0.5 / r)
    }

    pub fn recip(&self) -> Self {
        self.chain(1.0 / self.v, -1.0 / (self.v * self.v))
    }

    pub fn ln(&self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }

    pub fn abs(&self) -> Self {
        self.chain(self.v.abs(), if self.v < 0.0 { -1.0 } else { 1.0 })
    }

    pub fn atan(&self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    /// `atan2(self, x)`, the angle of the point `(x, self)`.
    pub fn atan2(&self, x: &Dual) -> Self {
        let y = self;
        let r2 = x.v * x.v + y.v * y.v;
        let g = x.g.iter().zip(&y.g).map(|(dx, dy)| (x.v * dy - y.v * dx) / r2).collect();
        Dual { v: y.v.atan2(x.v), g }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.chain(self.v * k, k)
    }
}

impl Add<&Dual> for &Dual {
    type Output = Dual;
    fn add(self, o: &Dual) -> Dual {
        Dual { v: self.v + o.v, g: self.g.iter().zip(&o.g).map(|(a, b)| a + b).collect() }
    }
}

impl Sub<&Dual> for &Dual {
    type Output = Dual;
    fn sub(self, o: &Dual) -> Dual {
        Dual { v: self.v - o.v, g: self.g.iter().zip(&o.g).map(|(a, b)| a - b).collect() }
    }
}

impl Mul<&Dual> for &Dual {
    type Output = Dual;
    fn mul(self, o: &Dual) -> Dual {
        let g = self.g.iter().zip(&o.g).map(|(a, b)| a * o.v + self.v * b).collect();
        Dual { v: self.v * o.v, g }
    }
}

impl Div<&Dual> for &Dual {
    type Output = Dual;
    fn div(self, o: &Dual) -> Dual {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let g = self.g.iter().zip(&o.g).map(|(a, b)| (a - q * b) * inv).collect();
        Dual { v: q, g }
    }
}

impl Neg for &Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

impl Add<f64> for &Dual {
    type Output = Dual;
    fn add(self, c: f64) -> Dual {
        Dual { v: self.v + c, g: self.g.clone() }
    }
}

impl Mul<f64> for &Dual {
    type Output = Dual;
    fn mul(self, c: f64) -> Dual {
        self.scale(c)
    }
}

macro_rules! owned_ops {
    ($($tr:ident $m:ident),*) => {$(
        impl $tr<Dual> for Dual {
            type Output = Dual;
            fn $m(self, o: Dual) -> Dual { (&self).$m(&o) }
        }
        impl $tr<&Dual> for Dual {
            type Output = Dual;
            fn $m(self, o: &Dual) -> Dual { (&self).$m(o) }
        }
        impl $tr<Dual> for &Dual {
            type Output = Dual;
            fn $m(self, o: Dual) -> Dual { self.$m(&o) }
        }
    )*};
}
owned_ops!(Add add, Sub sub, Mul mul, Div div);

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, c: f64) -> Dual {
        (&self) + c
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, c: f64) -> Dual {
        self.scale(c)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.scale(-1.0)
    }
}

/// Sum of a non-empty list of duals.
pub fn sum(xs: &[Dual]) -> Dual {
    let mut acc = xs[0].clone();
    for x in &xs[1..] {
        acc = &acc + x;
    }
    acc
}
