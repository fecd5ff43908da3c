//! Small dense linear algebra: one-sided Jacobi SVD and Gram–Schmidt.

use ndarray::Array2;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Singular values in descending order (one-sided Hestenes–Jacobi).
pub fn singular_values(m: &Array2<f64>) -> Result<Vec<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("singular_values: non-finite entry".into()));
    }
    // Work on the orientation with at least as many rows as columns, stored
    // column-wise so rotations touch contiguous memory.
    let a = if m.nrows() >= m.ncols() { m.to_owned() } else { m.t().to_owned() };
    let (rows, cols) = a.dim();
    let mut c: Vec<Vec<f64>> = (0..cols).map(|j| a.column(j).to_vec()).collect();
    let eps = f64::EPSILON;
    let mut converged = cols < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&c[p], &c[p]);
                let beta = dot(&c[q], &c[q]);
                let gamma = dot(&c[p], &c[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = c.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (u, v) = (*x, *y);
                    *x = cs * u - sn * v;
                    *y = sn * u + cs * v;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps ({rows}x{cols})")));
    }
    let mut s: Vec<f64> = c.iter().map(|col| norm(col)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Explained-variance fractions σ_i² / Σσ_j².
pub fn explained_fractions(sv: &[f64]) -> Vec<f64> {
    let tot: f64 = sv.iter().map(|s| s * s).sum();
    if tot == 0.0 {
        return vec![0.0; sv.len()];
    }
    sv.iter().map(|s| s * s / tot).collect()
}

/// Orthonormal basis of the span of `vs` (modified Gram–Schmidt, applied
/// twice). Vectors whose residual falls below `tol` relative to their own
/// norm are dropped.
pub fn orthonormalize(vs: &[Vec<f64>], tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let n0 = norm(v);
        if n0 == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let n = norm(&w);
        if n > tol * n0 {
            basis.push(w.iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Component of `v` orthogonal to the orthonormal `basis`.
pub fn orthogonal_residual(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut w = v.to_vec();
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, &w);
            for (wi, qi) in w.iter_mut().zip(q) {
                *wi -= c * qi;
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank_one_matrix() {
        let s = singular_values(&array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-14 && s[1].abs() < 1e-14);
    }

    #[test]
    fn wide_matrix_is_transposed() {
        let s = singular_values(&array![[3.0, 0.0, 0.0], [0.0, 4.0, 0.0]]).unwrap();
        assert_eq!(s, vec![4.0, 3.0]);
    }

    #[test]
    fn gram_schmidt_drops_dependent() {
        let b = orthonormalize(&[vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]], 1e-12);
        assert_eq!(b.len(), 2);
        assert!(dot(&b[0], &b[1]).abs() < 1e-15);
    }
}
