//! Grid discretisations of the KdV and nonlinear Schrödinger equations.
//!
//! A state stores, at every grid point, the field and its spatial derivatives
//! evaluated analytically from a Gaussian mixture. Mixtures are summed over
//! periodic images of the interval so that grid sums of total derivatives
//! vanish to rounding; at the default widths the images change the field by
//! less than 1e-15 relative to an unwrapped mixture.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stored derivative orders per grid point for KdV (φ … φ_xxxxx).
pub const KDV_ORDERS: usize = 6;
/// Magnitude features stored per grid point for NLS (|ψ|, |ψ_x|, |ψ_xx|).
pub const NLS_MAGS: usize = 3;
/// Complex derivative orders kept internally for NLS (ψ … ψ_xxxx).
pub const NLS_ORDERS: usize = 5;
pub const NLS_STRIDE: usize = NLS_MAGS + 2 * NLS_ORDERS;

const IMAGES: i32 = 2;
/// Endpoint magnitude must stay below this fraction of the peak.
pub const ENDPOINT_RATIO: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub n_points: usize,
    pub a: f64,
    pub b: f64,
    pub n_mix: usize,
    pub sigma: f64,
    pub amp_range: [f64; 2],
    pub mu_range: [f64; 2],
}

impl Default for PdeGrid {
    fn default() -> Self {
        PdeGrid {
            n_points: 40,
            a: -10.0,
            b: 10.0,
            n_mix: 5,
            sigma: 1.5,
            amp_range: [-5.0, 5.0],
            mu_range: [-3.0, 3.0],
        }
    }
}

impl PdeGrid {
    pub fn period(&self) -> f64 {
        self.b - self.a
    }

    pub fn xs(&self) -> Vec<f64> {
        let h = self.period() / self.n_points as f64;
        (0..self.n_points).map(|k| self.a + k as f64 * h).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 || self.n_mix == 0 || !(self.b > self.a) || !(self.sigma > 0.0) {
            return Err(Error::Config("invalid PDE grid parameters".into()));
        }
        Ok(())
    }

    pub fn draw_mixture<R: Rng>(&self, rng: &mut R) -> Mixture {
        let amps = (0..self.n_mix).map(|_| rng.gen_range(self.amp_range[0]..=self.amp_range[1])).collect();
        let mus = (0..self.n_mix).map(|_| rng.gen_range(self.mu_range[0]..=self.mu_range[1])).collect();
        Mixture { amps, mus, sigma: self.sigma }
    }

    fn check_mixture(&self, m: &Mixture) -> Result<()> {
        if m.amps.len() != m.mus.len() {
            return Err(Error::Config("mixture amplitude/mean count mismatch".into()));
        }
        for &mu in &m.mus {
            if mu < self.mu_range[0] || mu > self.mu_range[1] {
                return Err(Error::Config(format!(
                    "mixture mean {mu} outside [{}, {}]",
                    self.mu_range[0], self.mu_range[1]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub amps: Vec<f64>,
    pub mus: Vec<f64>,
    pub sigma: f64,
}

impl Mixture {
    /// Derivatives of orders `0..orders` at `x`, including periodic images.
    pub fn derivs(&self, x: f64, period: f64, orders: usize) -> Vec<f64> {
        let mut out = vec![0.0; orders];
        let s = self.sigma;
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * s);
        let mut he = vec![0.0; orders];
        for (&amp, &mu) in self.amps.iter().zip(&self.mus) {
            for img in -IMAGES..=IMAGES {
                let u = (x - mu + img as f64 * period) / s;
                let e = (-0.5 * u * u).exp();
                if e == 0.0 {
                    continue;
                }
                // Probabilists' Hermite polynomials: d^k/dx^k e^{-u²/2} = (-1/σ)^k He_k(u) e^{-u²/2}.
                he[0] = 1.0;
                if orders > 1 {
                    he[1] = u;
                }
                for k in 2..orders {
                    he[k] = u * he[k - 1] - (k - 1) as f64 * he[k - 2];
                }
                let mut scale = amp * norm * e;
                for k in 0..orders {
                    out[k] += scale * he[k];
                    scale *= -1.0 / s;
                }
            }
        }
        out
    }
}

/// KdV state: `KDV_ORDERS` derivatives per grid point, grid-major.
pub fn kdv_state(grid: &PdeGrid, mix: &Mixture) -> Result<Vec<f64>> {
    grid.check_mixture(mix)?;
    let mut z = Vec::with_capacity(grid.n_points * KDV_ORDERS);
    for x in grid.xs() {
        z.extend(mix.derivs(x, grid.period(), KDV_ORDERS));
    }
    Ok(z)
}

/// NLS state: magnitudes then interleaved (re, im) derivatives per grid point.
pub fn nls_state(grid: &PdeGrid, re: &Mixture, im: &Mixture) -> Result<Vec<f64>> {
    grid.check_mixture(re)?;
    grid.check_mixture(im)?;
    let mut z = Vec::with_capacity(grid.n_points * NLS_STRIDE);
    for x in grid.xs() {
        let r = re.derivs(x, grid.period(), NLS_ORDERS);
        let i = im.derivs(x, grid.period(), NLS_ORDERS);
        for k in 0..NLS_MAGS {
            z.push(r[k].hypot(i[k]));
        }
        for k in 0..NLS_ORDERS {
            z.push(r[k]);
            z.push(i[k]);
        }
    }
    Ok(z)
}

/// True when the field at the interval end is small relative to its peak.
pub fn endpoint_ok(z: &[f64], stride: usize, comp: usize) -> bool {
    let peak = z.chunks(stride).map(|c| c[comp].abs()).fold(0.0, f64::max);
    peak > 0.0 && z[comp].abs() < ENDPOINT_RATIO * peak
}

pub fn kdv_field(z: &[f64], out: &mut [f64]) {
    for (d, o) in z.chunks(KDV_ORDERS).zip(out.chunks_mut(KDV_ORDERS)) {
        o[0] = -d[3] + 6.0 * d[0] * d[1];
        o[1] = -d[4] + 6.0 * (d[1] * d[1] + d[0] * d[2]);
        o[2] = -d[5] + 6.0 * (3.0 * d[1] * d[2] + d[0] * d[3]);
        // Higher orders close the jet and are held fixed.
        for x in &mut o[3..] {
            *x = 0.0;
        }
    }
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// d^k/dx^k of |ψ|²ψ = ψ·ψ·ψ̄ by the Leibniz rule.
fn cubic_deriv(psi: &[Complex64], k: usize) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..=k {
        for j in 0..=(k - i) {
            let l = k - i - j;
            let c = binom(k, i) * binom(k - i, j);
            acc += psi[i] * psi[j] * psi[l].conj() * c;
        }
    }
    acc
}

pub fn nls_field(z: &[f64], kappa: f64, out: &mut [f64]) -> Result<()> {
    let i_unit = Complex64::new(0.0, 1.0);
    for (d, o) in z.chunks(NLS_STRIDE).zip(out.chunks_mut(NLS_STRIDE)) {
        let psi: Vec<Complex64> =
            (0..NLS_ORDERS).map(|k| Complex64::new(d[NLS_MAGS + 2 * k], d[NLS_MAGS + 2 * k + 1])).collect();
        for k in 0..NLS_MAGS {
            let dt = i_unit * 0.5 * psi[k + 2] - i_unit * kappa * cubic_deriv(&psi, k);
            let m = psi[k].norm();
            if m < 1e-300 {
                return Err(Error::Domain("vanishing NLS magnitude".into()));
            }
            o[k] = (psi[k].conj() * dt).re / m;
        }
        for x in &mut o[NLS_MAGS..] {
            *x = 0.0;
        }
    }
    Ok(())
}

/// Polynomial in jet variables φ, φ_x, φ_xx, … (monomial = exponent vector).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JetPoly {
    pub terms: std::collections::BTreeMap<Vec<u32>, f64>,
}

impl JetPoly {
    pub fn var(order: usize) -> Self {
        let mut e = vec![0; order + 1];
        e[order] = 1;
        let mut p = JetPoly::default();
        p.terms.insert(e, 1.0);
        p
    }

    fn add_term(&mut self, mut e: Vec<u32>, c: f64) {
        while e.last() == Some(&0) {
            e.pop();
        }
        let v = self.terms.entry(e.clone()).or_insert(0.0);
        *v += c;
        if *v == 0.0 {
            self.terms.remove(&e);
        }
    }

    pub fn add(&self, o: &JetPoly, k: f64) -> JetPoly {
        let mut r = self.clone();
        for (e, c) in &o.terms {
            r.add_term(e.clone(), k * c);
        }
        r
    }

    pub fn mul(&self, o: &JetPoly) -> JetPoly {
        let mut r = JetPoly::default();
        for (ea, ca) in &self.terms {
            for (eb, cb) in &o.terms {
                let n = ea.len().max(eb.len());
                let e = (0..n).map(|i| ea.get(i).unwrap_or(&0) + eb.get(i).unwrap_or(&0)).collect();
                r.add_term(e, ca * cb);
            }
        }
        r
    }

    /// Total x-derivative.
    pub fn dx(&self) -> JetPoly {
        let mut r = JetPoly::default();
        for (e, c) in &self.terms {
            for (k, &p) in e.iter().enumerate() {
                if p == 0 {
                    continue;
                }
                let mut ne = e.clone();
                ne[k] -= 1;
                if ne.len() < k + 2 {
                    ne.resize(k + 2, 0);
                }
                ne[k + 1] += 1;
                r.add_term(ne, c * p as f64);
            }
        }
        r
    }

    pub fn max_order(&self) -> usize {
        self.terms.keys().map(|e| e.len()).max().unwrap_or(1).saturating_sub(1)
    }

    pub fn eval(&self, jet: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().enumerate().map(|(k, &p)| jet[k].powi(p as i32)).product::<f64>())
            .sum()
    }
}

/// P₁ … P_n of the KdV recursion P_n = −dP_{n−1}/dx + Σ_{i=1}^{n−2} P_i P_{n−1−i}.
pub fn kdv_recursion(n: usize) -> Vec<JetPoly> {
    let mut ps: Vec<JetPoly> = vec![JetPoly::var(0)];
    for m in 2..=n {
        let mut next = JetPoly::default().add(&ps[m - 2].dx(), -1.0);
        for i in 1..=(m.saturating_sub(2)) {
            next = next.add(&ps[i - 1].mul(&ps[m - 2 - i]), 1.0);
        }
        ps.push(next);
    }
    ps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_derivatives_match_finite_differences() {
        let m = Mixture { amps: vec![1.3, -0.7], mus: vec![0.4, -1.1], sigma: 1.5 };
        let h = 1e-4;
        for &x in &[-2.0, 0.3, 1.7] {
            let d = m.derivs(x, 20.0, 6);
            let dp = m.derivs(x + h, 20.0, 6);
            let dm = m.derivs(x - h, 20.0, 6);
            for k in 0..5 {
                let fd = (dp[k] - dm[k]) / (2.0 * h);
                assert!((fd - d[k + 1]).abs() < 1e-6 * (1.0 + d[k + 1].abs()), "order {k}");
            }
        }
    }

    #[test]
    fn recursion_low_orders() {
        let ps = kdv_recursion(3);
        assert_eq!(ps[1], JetPoly::default().add(&JetPoly::var(1), -1.0));
        let p3 = JetPoly::var(0).mul(&JetPoly::var(0)).add(&JetPoly::var(2), 1.0);
        assert_eq!(ps[2], p3);
    }
}
