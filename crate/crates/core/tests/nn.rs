use conserva::nn::{io, ArchSpec, NeuralField};
use conserva::train::ensemble_loss;
use conserva::{Error, System};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn check_input_gradient(sys: &System, arch: &ArchSpec, seed: u64, coords: &[usize]) {
    let net = NeuralField::init(arch, sys.s(), seed).unwrap();
    let z = sys.sample(1, seed).unwrap().points.row(0).to_vec();
    let g = net.grad_input(&z).unwrap();
    for &c in coords {
        let h = 1e-5;
        let (mut p, mut m) = (z.clone(), z.clone());
        p[c] += h;
        m[c] -= h;
        let fd = (net.forward(&p).unwrap() - net.forward(&m).unwrap()) / (2.0 * h);
        assert!(rel_err(fd, g[c]) < 1e-5, "{} coord {c}: fd {fd} vs {}", sys.name(), g[c]);
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let kep = System::from_name("kepler").unwrap();
    check_input_gradient(&kep, &ArchSpec::plain(), 3, &[0, 1, 2, 3]);
    let tb = System::from_name("threebody").unwrap();
    let add = ArchSpec::for_system(&tb, "additive-body", 3).unwrap();
    check_input_gradient(&tb, &add, 4, &(0..12).collect::<Vec<_>>());
    let p = conserva::systems::SystemParams { masses: Some([400.0, 20.0, 1.0]), ..Default::default() };
    let tbu = System::with_params("threebody", &p).unwrap();
    let per = ArchSpec::for_system(&tbu, "additive-body", 3).unwrap();
    assert!(matches!(per, ArchSpec::AdditiveBody { per_body: true, .. }));
    check_input_gradient(&tbu, &per, 5, &(0..12).collect::<Vec<_>>());
    let kdv = System::from_name("kdv").unwrap();
    let int = ArchSpec::for_system(&kdv, "integral-pde", 3).unwrap();
    check_input_gradient(&kdv, &int, 6, &[0, 1, 2, 3, 6, 7, 8, 120, 121]);
}

fn small() -> ArchSpec {
    ArchSpec::Plain { hidden: vec![7, 5] }
}

fn loss_of(nets: &[NeuralField], z: &Array2<f64>, f: &Array2<f64>, lambda: f64) -> f64 {
    let tapes: Vec<_> = nets.iter().map(|n| n.tape(z.view()).unwrap()).collect();
    let views: Vec<_> = tapes.iter().map(|t| t.grads.view()).collect();
    ensemble_loss(f.view(), &views, lambda, false).unwrap().0.total
}

#[test]
fn loss_parameter_gradient_matches_finite_differences() {
    let sys = System::from_name("aniso-ho").unwrap();
    let z = sys.sample(16, 2).unwrap().points;
    let mut f = Array2::zeros(z.raw_dim());
    for (i, r) in z.rows().into_iter().enumerate() {
        f.row_mut(i).assign(&Array1::from(sys.field(&r.to_vec()).unwrap()));
    }
    let lambda = 0.3;
    let mut nets: Vec<NeuralField> = (0..3).map(|i| NeuralField::init(&small(), 4, 10 + i).unwrap()).collect();
    let tapes: Vec<_> = nets.iter().map(|n| n.tape(z.view()).unwrap()).collect();
    let views: Vec<_> = tapes.iter().map(|t| t.grads.view()).collect();
    let (_, adj) = ensemble_loss(f.view(), &views, lambda, true).unwrap();
    let analytic: Vec<Vec<f64>> = nets
        .iter()
        .zip(&tapes)
        .zip(&adj)
        .map(|((n, t), a)| {
            let mut acc = n.zeros_like();
            n.backward(t, a.view(), None, &mut acc);
            acc[0].flat()
        })
        .collect();
    for k in 0..3 {
        let base = nets[k].mlps[0].flat();
        for idx in [0, 3, 11, 30, base.len() - 6, base.len() - 1] {
            let h = 1e-6;
            let mut p = base.clone();
            p[idx] += h;
            nets[k].mlps[0].set_flat(&p);
            let lp = loss_of(&nets, &z, &f, lambda);
            p[idx] -= 2.0 * h;
            nets[k].mlps[0].set_flat(&p);
            let lm = loss_of(&nets, &z, &f, lambda);
            nets[k].mlps[0].set_flat(&base);
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[k][idx];
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-4), "net {k} param {idx}: fd {fd} vs {an}");
        }
    }
}

#[test]
fn value_parameter_gradient_matches_finite_differences() {
    let tb = System::from_name("threebody").unwrap();
    let arch = ArchSpec::AdditiveBody { bodies: 3, hidden: vec![6, 4], per_body: false };
    let mut net = NeuralField::init(&arch, 12, 1).unwrap();
    let z = tb.sample(5, 1).unwrap().points;
    let hbar = Array1::from(vec![0.3, -1.0, 2.0, 0.5, 1.5]);
    let grads = net.grad_params_value(z.view(), hbar.view()).unwrap();
    let obj = |n: &NeuralField| n.values(z.view()).unwrap().dot(&hbar);
    for m in 0..net.mlps.len() {
        let base = net.mlps[m].flat();
        let an = grads[m].flat();
        for idx in [0, 5, base.len() / 2, base.len() - 1] {
            let h = 1e-6;
            let mut p = base.clone();
            p[idx] += h;
            net.mlps[m].set_flat(&p);
            let vp = obj(&net);
            p[idx] -= 2.0 * h;
            net.mlps[m].set_flat(&p);
            let vm = obj(&net);
            net.mlps[m].set_flat(&base);
            let fd = (vp - vm) / (2.0 * h);
            assert!((fd - an[idx]).abs() < 1e-6 * an[idx].abs().max(1e-3), "mlp {m} param {idx}");
        }
    }
}

#[test]
fn initialisation_is_seeded_and_bounded() {
    let a = NeuralField::init(&ArchSpec::plain(), 4, 9).unwrap();
    let b = NeuralField::init(&ArchSpec::plain(), 4, 9).unwrap();
    let c = NeuralField::init(&ArchSpec::plain(), 4, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let m = &a.mlps[0];
    assert_eq!(m.dims, vec![4, 256, 256, 1]);
    for w in &m.w {
        let bound = 1.0 / (w.ncols() as f64).sqrt();
        assert!(w.iter().all(|x| x.abs() <= bound));
    }
    assert!(m.b.iter().all(|b| b.iter().all(|&x| x == 0.0)));
}

#[test]
fn ensemble_round_trip() {
    let tb = System::from_name("threebody").unwrap();
    let nets = vec![
        NeuralField::init(&ArchSpec::plain(), 12, 1).unwrap(),
        NeuralField::init(&ArchSpec::for_system(&tb, "additive-body", 3).unwrap(), 12, 2).unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    let (h, b) = (dir.path().join("e.json"), dir.path().join("e.bin"));
    io::save(&nets, &h, &b).unwrap();
    let back = io::load(&h, &b).unwrap();
    assert_eq!(back, nets);
    let z = tb.sample(3, 0).unwrap().points;
    for (x, y) in nets.iter().zip(&back) {
        assert_eq!(x.eval_batch(z.view()).unwrap(), y.eval_batch(z.view()).unwrap());
    }
    let bytes = std::fs::read(&b).unwrap();
    std::fs::write(&b, &bytes[..bytes.len() - 8]).unwrap();
    assert!(io::load(&h, &b).is_err());
    assert!(matches!(io::load(&dir.path().join("none.json"), &b), Err(Error::MissingArtifact(_))));
}

#[test]
fn dimension_mismatch_is_reported() {
    let net = NeuralField::init(&ArchSpec::plain(), 4, 0).unwrap();
    assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Dimension { expected: 4, got: 2 })));
    let kep = System::from_name("kepler").unwrap();
    assert!(ArchSpec::for_system(&kep, "additive-body", 3).is_err());
    assert!(ArchSpec::for_system(&kep, "integral-pde", 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn batched_and_pointwise_evaluation_agree(seed in 0u64..1000) {
        let sys = System::from_name("iso-ho").unwrap();
        let net = NeuralField::init(&small(), 4, seed).unwrap();
        let z = sys.sample(8, seed).unwrap().points;
        let (v, g) = net.eval_batch(z.view()).unwrap();
        for (i, r) in z.rows().into_iter().enumerate() {
            let zr = r.to_vec();
            prop_assert!((net.forward(&zr).unwrap() - v[i]).abs() < 1e-12);
            let gi = net.grad_input(&zr).unwrap();
            for k in 0..4 {
                prop_assert!((gi[k] - g[[i, k]]).abs() < 1e-12);
            }
        }
    }
}
