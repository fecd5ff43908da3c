//! Fully connected SiLU network with a scalar output, its input gradient, and
//! the exact parameter gradient of any loss that depends on that input
//! gradient (double backpropagation).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_d1(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn silu_d2(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

/// Weights are stored `out × in`; the last layer has a single output and no
/// activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

/// Intermediates of a forward pass with input gradient.
pub struct MlpCache {
    x: Array2<f64>,
    z: Vec<Array2<f64>>,
    a: Vec<Array2<f64>>,
    /// ∂h/∂z_k for each hidden layer k.
    d: Vec<Array2<f64>>,
    pub values: Array1<f64>,
    pub grads: Array2<f64>,
}

impl Mlp {
    /// `dims = [input, hidden…, 1]`.
    pub fn zeros(dims: &[usize]) -> Mlp {
        assert!(dims.len() >= 2 && *dims.last().unwrap() == 1, "scalar output required");
        let w = dims.windows(2).map(|p| Array2::zeros((p[1], p[0]))).collect();
        let b = dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Mlp { dims: dims.to_vec(), w, b }
    }

    /// Uniform fan-in initialisation U[−1/√fan_in, 1/√fan_in], zero biases.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Mlp {
        let mut m = Mlp::zeros(dims);
        for w in &mut m.w {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_params(&self) -> usize {
        self.w.iter().map(|w| w.len()).sum::<usize>() + self.b.iter().map(|b| b.len()).sum::<usize>()
    }

    fn hidden(&self) -> usize {
        self.w.len() - 1
    }

    /// Parameter slices in serialisation order (per layer: W row-major, then b).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            v.push(w.as_slice().expect("standard layout"));
            v.push(b.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for (w, b) in self.w.iter_mut().zip(self.b.iter_mut()) {
            v.push(w.as_slice_mut().expect("standard layout"));
            v.push(b.as_slice_mut().expect("standard layout"));
        }
        v
    }

    pub fn flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut off = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&p[off..off + s.len()]);
            off += s.len();
        }
    }

    pub fn fill_zero(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(0.0);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Output values only.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut a = x.to_owned();
        for k in 0..self.hidden() {
            let mut z = a.dot(&self.w[k].t());
            z += &self.b[k];
            z.mapv_inplace(silu);
            a = z;
        }
        let l = self.hidden();
        let mut h = a.dot(&self.w[l].row(0));
        h += self.b[l][0];
        h
    }

    /// Forward pass plus ∂h/∂x for every row of `x`.
    pub fn forward_grad(&self, x: ArrayView2<f64>) -> MlpCache {
        let nh = self.hidden();
        let mut z = Vec::with_capacity(nh);
        let mut a: Vec<Array2<f64>> = Vec::with_capacity(nh);
        for k in 0..nh {
            let prev = if k == 0 { x } else { a[k - 1].view() };
            let mut zk = prev.dot(&self.w[k].t());
            zk += &self.b[k];
            a.push(zk.mapv(silu));
            z.push(zk);
        }
        let last = a.last().map(|m| m.view()).unwrap_or(x);
        let mut values = last.dot(&self.w[nh].row(0));
        values += self.b[nh][0];

        let mut d: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); nh];
        let mut grads;
        if nh == 0 {
            grads = Array2::zeros(x.raw_dim());
            grads.rows_mut().into_iter().for_each(|mut r| r.assign(&self.w[0].row(0)));
        } else {
            let mut u = Array2::zeros(z[nh - 1].raw_dim());
            u.rows_mut().into_iter().for_each(|mut r| r.assign(&self.w[nh].row(0)));
            for k in (0..nh).rev() {
                Zip::from(&mut u).and(&z[k]).for_each(|u, &zz| *u *= silu_d1(zz));
                let next = u.dot(&self.w[k]);
                d[k] = std::mem::replace(&mut u, next);
            }
            grads = u;
        }
        MlpCache { x: x.to_owned(), z, a, d, values, grads }
    }

    /// Accumulate into `acc` the parameter gradient of a loss whose adjoints
    /// with respect to the input gradients are `gbar` and with respect to the
    /// outputs are `hbar`.
    pub fn backward(&self, c: &MlpCache, gbar: ArrayView2<f64>, hbar: Option<ArrayView1<f64>>, acc: &mut Mlp) {
        let nh = self.hidden();
        if nh == 0 {
            // h = w·x + b, ∂h/∂x = w.
            acc.w[0].row_mut(0).scaled_add(1.0, &gbar.sum_axis(Axis(0)));
            if let Some(hb) = hbar {
                acc.w[0].row_mut(0).scaled_add(1.0, &c.x.t().dot(&hb));
                acc.b[0][0] += hb.sum();
            }
            return;
        }
        let mut zbar: Vec<Array2<f64>> = c.z.iter().map(|z| Array2::zeros(z.raw_dim())).collect();

        // Reverse through the input-gradient computation.
        general_mat_mul(1.0, &c.d[0].t(), &gbar, 1.0, &mut acc.w[0]);
        let mut dbar = gbar.dot(&self.w[0].t());
        for k in 0..nh {
            // d_k = u_k ⊙ σ'(z_k), with u_k = d_{k+1} W_{k+1} (or the output row).
            let mut ubar = dbar;
            let zk = &c.z[k];
            if k + 1 < nh {
                let u = c.d[k + 1].dot(&self.w[k + 1]);
                Zip::from(&mut zbar[k]).and(&ubar).and(&u).and(zk).for_each(|zb, &db, &u, &zz| {
                    *zb += db * u * silu_d2(zz);
                });
                Zip::from(&mut ubar).and(zk).for_each(|ub, &zz| *ub *= silu_d1(zz));
                general_mat_mul(1.0, &c.d[k + 1].t(), &ubar, 1.0, &mut acc.w[k + 1]);
                dbar = ubar.dot(&self.w[k + 1].t());
            } else {
                let wout = self.w[nh].row(0);
                Zip::from(zbar[k].rows_mut()).and(ubar.rows_mut()).and(zk.rows()).for_each(|mut zb, mut ub, zr| {
                    Zip::from(&mut zb).and(&mut ub).and(&zr).and(&wout).for_each(|zb, ub, &zz, &w| {
                        *zb += *ub * w * silu_d2(zz);
                        *ub *= silu_d1(zz);
                    });
                });
                acc.w[nh].row_mut(0).scaled_add(1.0, &ubar.sum_axis(Axis(0)));
                dbar = Array2::zeros((0, 0));
            }
        }

        // Output adjoint through the forward graph.
        let mut abar: Option<Array2<f64>> = None;
        if let Some(hb) = hbar {
            let alast = &c.a[nh - 1];
            acc.w[nh].row_mut(0).scaled_add(1.0, &alast.t().dot(&hb));
            acc.b[nh][0] += hb.sum();
            let wout = self.w[nh].row(0);
            let mut ab = Array2::zeros(alast.raw_dim());
            Zip::from(ab.rows_mut()).and(&hb).for_each(|mut r, &h| r.assign(&(&wout * h)));
            abar = Some(ab);
        }
        for k in (0..nh).rev() {
            let mut zb = std::mem::replace(&mut zbar[k], Array2::zeros((0, 0)));
            if let Some(ab) = abar.take() {
                Zip::from(&mut zb).and(&ab).and(&c.z[k]).for_each(|zb, &a, &zz| *zb += a * silu_d1(zz));
            }
            let prev = if k == 0 { c.x.view() } else { c.a[k - 1].view() };
            general_mat_mul(1.0, &zb.t(), &prev, 1.0, &mut acc.w[k]);
            acc.b[k] += &zb.sum_axis(Axis(0));
            if k > 0 {
                abar = Some(zb.dot(&self.w[k]));
            }
        }
    }
}
