use conserva::nn::{ArchSpec, NeuralField};
use conserva::systems::SystemParams;
use conserva::train::*;
use conserva::{Error, System};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;

fn field_rows(sys: &System, z: ArrayView2<f64>) -> Array2<f64> {
    let mut f = Array2::zeros(z.raw_dim());
    for (i, r) in z.rows().into_iter().enumerate() {
        f.row_mut(i).assign(&ndarray::Array1::from(sys.field(&r.to_vec()).unwrap()));
    }
    f
}

#[test]
fn loss_examples() {
    let sys = System::from_name("iso-ho").unwrap();
    let z = sys.sample(50, 1).unwrap().points;
    let f = field_rows(&sys, z.view());
    assert!((conservation_loss(f.view(), f.view()).unwrap() - 1.0).abs() < 1e-14);
    // ∇(x² + p_x²) is orthogonal to the flow.
    let mut g = Array2::zeros(z.raw_dim());
    for (i, r) in z.rows().into_iter().enumerate() {
        g[[i, 0]] = 2.0 * r[0];
        g[[i, 1]] = 2.0 * r[1];
    }
    assert!(conservation_loss(f.view(), g.view()).unwrap() < 1e-28);
    assert!((independence_penalty(f.view(), &[g.view(), g.view()]).unwrap() - 1.0).abs() < 1e-14);
    let mut h = Array2::zeros(z.raw_dim());
    for (i, r) in z.rows().into_iter().enumerate() {
        h[[i, 2]] = 2.0 * r[2];
        h[[i, 3]] = 2.0 * r[3];
    }
    assert!(independence_penalty(f.view(), &[g.view(), h.view()]).unwrap() < 1e-28);
    assert_eq!(independence_penalty(f.view(), &[g.view()]).unwrap(), 0.0);
    let (parts, _) = ensemble_loss(f.view(), &[g.view()], 0.5, false).unwrap();
    assert_eq!(parts.total, parts.l1);
}

#[test]
fn analytic_kepler_momentum_has_zero_loss() {
    let sys = System::from_name("kepler").unwrap();
    let z = sys.sample(200, 3).unwrap().points;
    let f = field_rows(&sys, z.view());
    let l = &sys.analytic_cqs()[1];
    assert_eq!(l.label, "angular_momentum");
    let mut g = Array2::zeros(z.raw_dim());
    for (i, r) in z.rows().into_iter().enumerate() {
        g.row_mut(i).assign(&ndarray::Array1::from(l.eval(&r.to_vec()).1));
    }
    assert!(conservation_loss(f.view(), g.view()).unwrap() < 1e-20);
}

#[test]
fn degenerate_points_are_skipped_up_to_one_percent() {
    let sys = System::from_name("iso-ho").unwrap();
    let z = sys.sample(200, 1).unwrap().points;
    let f = field_rows(&sys, z.view());
    let mut g = f.clone();
    g.row_mut(0).fill(0.0);
    let (p, _) = ensemble_loss(f.view(), &[g.view()], 0.0, false).unwrap();
    assert_eq!(p.skipped, 1);
    g.row_mut(1).fill(0.0);
    g.row_mut(2).fill(0.0);
    assert!(matches!(ensemble_loss(f.view(), &[g.view()], 0.0, false), Err(Error::Degenerate(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn losses_are_bounded_and_objective_is_exact(seed in 0u64..10_000, lambda in 0.0f64..3.0) {
        let sys = System::from_name("aniso-ho").unwrap();
        let z = sys.sample(32, seed).unwrap().points;
        let f = field_rows(&sys, z.view());
        let nets: Vec<NeuralField> =
            (0..3).map(|i| NeuralField::init(&ArchSpec::Plain { hidden: vec![8] }, 4, seed + i).unwrap()).collect();
        let g: Vec<_> = nets.iter().map(|n| n.eval_batch(z.view()).unwrap().1).collect();
        let views: Vec<_> = g.iter().map(|a| a.view()).collect();
        let (p, _) = ensemble_loss(f.view(), &views, lambda, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&p.l1) && (0.0..=1.0).contains(&p.l2));
        prop_assert!((p.total - (p.l1 + lambda * p.l2)).abs() <= 1e-12);
        // Affine heads 3H + 7 and positive rescalings leave both terms unchanged.
        let scaled: Vec<_> = g.iter().enumerate().map(|(i, a)| a * (3.0 * (i + 1) as f64)).collect();
        let sv: Vec<_> = scaled.iter().map(|a| a.view()).collect();
        let (q, _) = ensemble_loss(f.view(), &sv, lambda, false).unwrap();
        prop_assert!((q.l1 - p.l1).abs() < 1e-12 && (q.l2 - p.l2).abs() < 1e-12);
    }
}

fn damped(gamma: f64) -> System {
    System::with_params("damped-ho", &SystemParams { gamma: Some(gamma), ..Default::default() }).unwrap()
}

#[test]
fn training_is_deterministic_and_reports_every_epoch() {
    let sys = damped(0.0);
    let batch = sys.sample(400, 2).unwrap();
    let cfg = TrainConfig { epochs: 3, seed: 5, ..Default::default() };
    let arch = ArchSpec::Plain { hidden: vec![16, 16] };
    let (n1, r1) = train(&sys, &batch, 2, &arch, &cfg).unwrap();
    let (n2, r2) = train(&sys, &batch, 2, &arch, &cfg).unwrap();
    assert_eq!(n1, n2);
    assert_eq!(r1, r2);
    assert_eq!(r1.epochs.len(), 3);
    for e in &r1.epochs {
        assert!((e.train.total - (e.train.l1 + cfg.lambda * e.train.l2)).abs() <= 1e-12);
        assert_eq!(e.train.per_net.len(), 2);
    }
    let csv = r1.to_csv();
    assert!(csv.starts_with("epoch,l1,l2,l,l1_test,l2_test,l_test,l1_net0,l1_net1"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn small_learning_rate_full_batch_descends() {
    let sys = damped(0.0);
    let mut ok = 0;
    for seed in 0..20 {
        let batch = sys.sample(256, seed).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            lr: 1e-5,
            batch_size: 128,
            split: 0.5,
            eval_points: 128,
            seed,
            ..Default::default()
        };
        let (_, rep) = train(&sys, &batch, 1, &ArchSpec::Plain { hidden: vec![32, 32] }, &cfg).unwrap();
        let l: Vec<f64> = rep.epochs.iter().map(|e| e.train.total).collect();
        if l.windows(2).all(|w| w[1] <= w[0] + 1e-15) {
            ok += 1;
        }
    }
    assert!(ok >= 19, "{ok}/20 monotone");
}

#[test]
fn configuration_errors() {
    let sys = damped(0.0);
    let batch = sys.sample(100, 0).unwrap();
    let arch = ArchSpec::plain();
    let bad = TrainConfig { lambda: -1.0, ..Default::default() };
    assert!(matches!(train(&sys, &batch, 1, &arch, &bad), Err(Error::Config(_))));
    let bad = TrainConfig { split: 1.0, ..Default::default() };
    assert!(matches!(train(&sys, &batch, 1, &arch, &bad), Err(Error::Config(_))));
    assert!(matches!(train(&sys, &batch, 3, &arch, &TrainConfig::default()), Err(Error::Config(_))));
    assert!(lambda_sweep(&sys, &batch, 1, &arch, &[], &TrainConfig::default()).is_err());
    assert!(lambda_sweep(&sys, &batch, 1, &arch, &[0.5, 0.1], &TrainConfig::default()).is_err());
}

#[test]
fn sweep_keeps_grid() {
    let sys = damped(0.0);
    let batch = sys.sample(200, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let grid = [0.0, 0.1, 1.0];
    let r = lambda_sweep(&sys, &batch, 2, &ArchSpec::Plain { hidden: vec![8] }, &grid, &cfg).unwrap();
    assert_eq!(r.lambdas, grid);
    assert_eq!(r.l1.len(), 3);
    assert_eq!(r.per_net[0].len(), 2);
    assert!(r.to_csv().starts_with("lambda,l1,l2\n"));
}

#[test]
fn overfit_window() {
    let rec = |e: usize, tr: f64, te: f64| EpochRecord {
        epoch: e,
        train: LossParts { per_net: vec![tr], l1: tr, l2: 0.0, total: tr, skipped: 0 },
        test: LossParts { per_net: vec![te], l1: te, l2: 0.0, total: te, skipped: 0 },
    };
    let mut rep = LossReport {
        lambda: 0.0,
        epochs: vec![rec(0, 1.0, 1.0)],
        final_train: LossParts::default(),
        final_test: LossParts::default(),
    };
    assert_eq!(overfit_check(&rep).unwrap(), 0.0);
    rep.epochs = (0..20).map(|e| rec(e, 1.0, if e < 10 { 9.0 } else { 1.2 })).collect();
    assert!((overfit_check(&rep).unwrap() - 0.2).abs() < 1e-12);
    rep.epochs.clear();
    assert!(overfit_check(&rep).is_err());
}
