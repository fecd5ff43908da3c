use conserva::linalg;
use conserva::rank::*;
use conserva::System;
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Lin(Vec<f64>);

impl ScalarFn for Lin {
    fn eval_grad(&self, z: &[f64]) -> Option<(f64, Vec<f64>)> {
        Some((linalg::dot(&self.0, z), self.0.clone()))
    }
}

fn points(p: usize, s: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((p, s), |_| rng.gen_range(-2.0..2.0))
}

fn refs<T: ScalarFn>(v: &[T]) -> Vec<&dyn ScalarFn> {
    v.iter().map(|f| f as &dyn ScalarFn).collect()
}

/// n linear functions on ℝ^s whose coefficient matrix has rank r: r random
/// orthonormal directions plus random combinations of them, shuffled. The
/// orthonormal block keeps every nonzero explained fraction above 1/n.
fn linear_set(n: usize, s: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<Lin> {
    use rand::seq::SliceRandom;
    let raw: Vec<Vec<f64>> = (0..r).map(|_| (0..s).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let v = linalg::orthonormalize(&raw, 1e-10);
    assert_eq!(v.len(), r);
    let mut out: Vec<Lin> = v.iter().map(|q| Lin(q.clone())).collect();
    for _ in r..n {
        let c: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        out.push(Lin((0..s).map(|k| (0..r).map(|j| c[j] * v[j][k]).sum()).collect()));
    }
    out.shuffle(rng);
    out
}

#[test]
fn gradient_matrix_examples() {
    let fs = [Lin(vec![1.0, 0.0]), Lin(vec![0.0, 1.0])];
    let b = gradient_matrix(&refs(&fs), &[0.3, -0.2]).unwrap();
    assert_eq!(b, Array2::<f64>::eye(2));
    let fs = [Lin(vec![1.0, 0.0]), Lin(vec![2.0, 0.0])];
    let b = gradient_matrix(&refs(&fs), &[0.3, -0.2]).unwrap();
    assert_eq!(b.column(0), b.column(1));
    let fs = [Lin(vec![0.0, 0.0])];
    assert!(gradient_matrix(&refs(&fs), &[1.0, 1.0]).is_err());

    let kep = System::from_name("kepler").unwrap();
    let cqs = kep.analytic_cqs();
    let r: Vec<&dyn ScalarFn> = cqs.iter().map(|c| c as &dyn ScalarFn).collect();
    // Hand gradients in (x, p_x, y, p_y) of H = p²/2 − 1/r, L = x p_y − y p_x,
    // A_x = p_y L − x/r.
    let oracle = |z: &[f64]| {
        let (x, px, y, py) = (z[0], z[1], z[2], z[3]);
        let r = (x * x + y * y).sqrt();
        let l = x * py - y * px;
        [
            [x / r.powi(3), px, y / r.powi(3), py],
            [py, -y, -px, x],
            [py * py - 1.0 / r + x * x / r.powi(3), -py * y, -py * px + x * y / r.powi(3), l + py * x],
        ]
    };
    for z in [[1.0, 0.0, 0.0, 1.0], [1.0, 0.3, -0.4, 0.8], [-0.7, -0.2, 1.1, 0.5]] {
        let b = gradient_matrix(&r, &z).unwrap();
        assert_eq!(b.dim(), (4, 3));
        for (j, e) in oracle(&z).iter().enumerate() {
            let n = linalg::norm(e);
            for i in 0..4 {
                assert!((b[[i, j]] - e[i] / n).abs() < 1e-12, "col {j} at {z:?}");
            }
        }
    }
    // A circular orbit is special: ∇H ∥ ∇L there.
    let rank_at = |z: &[f64]| rank_from_spectrum(&singular_values(&gradient_matrix(&r, z).unwrap()).unwrap(), DEFAULT_EPS);
    assert_eq!(rank_at(&[1.0, 0.0, 0.0, 1.0]), 2);
    assert_eq!(rank_at(&[-0.7, -0.2, 1.1, 0.5]), 3);
}

#[test]
fn singular_value_examples() {
    assert_eq!(singular_values(&Array2::<f64>::eye(3)).unwrap(), vec![1.0, 1.0, 1.0]);
    let m = ndarray::array![[0.0, 2.0, 0.0], [0.0, 0.0, 1.0], [3.0, 0.0, 0.0]];
    let sv = singular_values(&m).unwrap();
    for (a, b) in sv.iter().zip([3.0, 2.0, 1.0]) {
        assert!((a - b).abs() < 1e-14);
    }
    let sv = singular_values(&ndarray::array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
    assert!((sv[0] - 2.0).abs() < 1e-14 && sv[1].abs() < 1e-14);
    assert!(singular_values(&ndarray::array![[f64::NAN]]).is_err());
}

/// Eigenvalues of a symmetric 3×3 matrix from its characteristic polynomial.
fn sym3_eigs(a: &Array2<f64>) -> [f64; 3] {
    let q = (a[[0, 0]] + a[[1, 1]] + a[[2, 2]]) / 3.0;
    let p1 = a[[0, 1]].powi(2) + a[[0, 2]].powi(2) + a[[1, 2]].powi(2);
    let p2 = (a[[0, 0]] - q).powi(2) + (a[[1, 1]] - q).powi(2) + (a[[2, 2]] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - &(Array2::<f64>::eye(3) * q)) / p;
    let det = b[[0, 0]] * (b[[1, 1]] * b[[2, 2]] - b[[1, 2]] * b[[2, 1]]) - b[[0, 1]] * (b[[1, 0]] * b[[2, 2]] - b[[1, 2]] * b[[2, 0]])
        + b[[0, 2]] * (b[[1, 0]] * b[[2, 1]] - b[[1, 1]] * b[[2, 0]]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

proptest! {
    #[test]
    fn svd_matches_characteristic_polynomial(seed in any::<u64>()) {
        let m = points(6, 3, seed);
        let mtm = m.t().dot(&m);
        let eig = sym3_eigs(&mtm);
        let sv = singular_values(&m).unwrap();
        for k in 0..3 {
            prop_assert!((sv[k] - eig[k].max(0.0).sqrt()).abs() < 1e-10 * sv[0].max(1.0));
        }
    }

    #[test]
    fn rank_monotone_and_scale_invariant(seed in any::<u64>(), k in 1e-6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..5);
        let r = rng.gen_range(1..=n);
        let fs = linear_set(n, 5, r, &mut rng);
        let pts = points(40, 5, seed);
        let base = differential_rank(&refs(&fs), pts.view(), DEFAULT_EPS, 1).unwrap();
        let scaled: Vec<Lin> = fs.iter().enumerate().map(|(i, f)| Lin(f.0.iter().map(|x| if i == 0 { x * k } else { *x }).collect())).collect();
        let sc = differential_rank(&refs(&scaled), pts.view(), DEFAULT_EPS, 1).unwrap();
        prop_assert_eq!(&base.per_point_rank, &sc.per_point_rank);
        let mut sup = linear_set(1, 5, 1, &mut rng);
        sup.extend(fs);
        let sup_rank = differential_rank(&refs(&sup), pts.view(), DEFAULT_EPS, 1).unwrap();
        prop_assert!(sup_rank.k_d >= base.k_d);
        for f in &base.fractions {
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn differential_rank_examples() {
    let p1 = points(50, 1, 1);
    let x = FnScalar(|z: &[f64]| (z[0], vec![1.0]));
    let x2 = FnScalar(|z: &[f64]| (2.0 * z[0], vec![2.0]));
    let x1 = FnScalar(|z: &[f64]| (z[0] + 1.0, vec![1.0]));
    assert_eq!(differential_rank(&[&x, &x2, &x1], p1.view(), DEFAULT_EPS, 0).unwrap().k_d, 1);
    let p2 = points(50, 2, 1);
    let fs = [Lin(vec![1.0, 0.0]), Lin(vec![0.0, 1.0]), Lin(vec![1.0, 1.0])];
    let rep = differential_rank(&refs(&fs), p2.view(), DEFAULT_EPS, 0).unwrap();
    assert_eq!(rep.k_d, 2);
    assert_eq!(rep.per_point_rank.len(), 50);
    assert!(rep.fractions_csv().starts_with("component,mean_fraction"));
    let zero = [Lin(vec![0.0, 0.0])];
    assert!(differential_rank(&refs(&zero), p2.view(), DEFAULT_EPS, 0).is_err());
    assert!(differential_rank(&refs(&fs), p2.view(), 0.0, 0).is_err());
}

#[test]
fn linear_oracle_and_method_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..100 {
        let s = rng.gen_range(3..7);
        let n = rng.gen_range(1..s);
        let r = rng.gen_range(1..=n);
        let fs = linear_set(n, s, r, &mut rng);
        let pts = points(60, s, trial);
        assert_eq!(differential_rank(&refs(&fs), pts.view(), DEFAULT_EPS, trial).unwrap().k_d, r, "trial {trial}");

        let known = linear_set(r, s, r, &mut rng);
        let r = known.len();
        let cand = if rng.gen_bool(0.5) {
            let c: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Lin((0..s).map(|k| (0..r).map(|j| c[j] * known[j].0[k]).sum()).collect())
        } else {
            Lin((0..s).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let a = is_independent_a(&refs(&known), &cand, pts.view(), EPS_SIGMA).unwrap();
        let b = is_independent_b(&refs(&known), &cand, pts.slice(ndarray::s![..10, ..]), EPS_I, trial).unwrap();
        assert_eq!(Some(a), b, "trial {trial}");
    }
}

#[test]
fn independence_examples() {
    let p2 = points(30, 2, 3);
    let x = FnScalar(|z: &[f64]| (z[0], vec![1.0, 0.0]));
    let xx = FnScalar(|z: &[f64]| (z[0] * z[0], vec![2.0 * z[0], 0.0]));
    let y = FnScalar(|z: &[f64]| (z[1], vec![0.0, 1.0]));
    assert!(!is_independent_a(&[&x], &xx, p2.view(), EPS_SIGMA).unwrap());
    assert!(is_independent_a(&[&x], &y, p2.view(), EPS_SIGMA).unwrap());

    let p3 = points(10, 3, 3);
    let x3 = Lin(vec![1.0, 0.0, 0.0]);
    let affine = FnScalar(|z: &[f64]| (3.0 * z[0] + 5.0, vec![3.0, 0.0, 0.0]));
    let zc = Lin(vec![0.0, 0.0, 1.0]);
    assert_eq!(is_independent_b(&[&x3], &affine, p3.view(), EPS_I, 0).unwrap(), Some(false));
    assert_eq!(is_independent_b(&[&x3], &zc, p3.view(), EPS_I, 0).unwrap(), Some(true));
    // No complement left: B declines and the combined test falls back to A.
    let full = [Lin(vec![1.0, 0.0, 0.0]), Lin(vec![0.0, 1.0, 0.0]), Lin(vec![0.0, 0.0, 1.0])];
    assert_eq!(is_independent_b(&refs(&full), &zc, p3.view(), EPS_I, 0).unwrap(), None);
    assert!(!is_independent(&refs(&full), &zc, p3.view(), p3.view(), 0).unwrap());

    let ho = System::from_name("iso-ho").unwrap();
    let cqs = ho.analytic_cqs();
    let pts = ho.sample(200, 8).unwrap().points;
    let known: Vec<&dyn ScalarFn> = cqs[..3].iter().map(|c| c as &dyn ScalarFn).collect();
    let l = FnScalar(|z: &[f64]| (z[0] * z[3] - z[2] * z[1], vec![z[3], -z[2], -z[1], z[0]]));
    assert!(!is_independent_a(&known, &l, pts.view(), EPS_SIGMA).unwrap());
    assert_eq!(is_independent_b(&known, &l, pts.view(), EPS_I, 1).unwrap(), Some(false));
}

fn radial(pts: ArrayView2<f64>) -> bool {
    let r2 = FnScalar(|z: &[f64]| (z[0] * z[0] + z[1] * z[1], vec![2.0 * z[0], 2.0 * z[1]]));
    let r = FnScalar(|z: &[f64]| {
        let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
        (r, vec![z[0] / r, z[1] / r])
    });
    let x = FnScalar(|z: &[f64]| (z[0], vec![1.0, 0.0]));
    equivalence_check(&r2, &r, pts).unwrap() && !equivalence_check(&x, &r, pts).unwrap()
}

#[test]
fn equivalence_examples() {
    assert!(radial(points(100, 2, 5).view()));
}

#[test]
fn manifold_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h: Vec<f64> = (0..1500).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = Array2::from_shape_fn((1500, 3), |(i, j)| match j {
        0 => h[i],
        1 => 2.0 * h[i],
        _ => h[i] * h[i],
    });
    let c = manifold_rank(a.view(), &default_scales(), 0).unwrap();
    assert_eq!(c.plateau, Some(1));

    let z = points(1500, 4, 2);
    let w = ndarray::array![[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
    let a = z.dot(&w);
    let c = manifold_rank(a.view(), &default_scales(), 0).unwrap();
    assert_eq!(c.plateau, Some(3));
    assert!(c.n_eff.iter().flatten().all(|&v| v.round() == 3.0));
    assert!(manifold_rank(a.slice(ndarray::s![..3, ..]), &default_scales(), 0).is_err());
    // A scale too small for any neighbourhood is invalid.
    let c = manifold_rank(a.view(), &[1e-9], 0).unwrap();
    assert_eq!(c.n_eff, vec![None]);
    assert_eq!(c.plateau, None);
}

