use std::collections::BTreeSet;

use nalgebra::DMatrix;
use poisonbench::attacks::*;
use poisonbench::datakit::*;
use poisonbench::diffcore::*;
use poisonbench::evaluate::test_accuracy;
use proptest::prelude::*;

fn gauss_spec(b: f64, eps: f64, seed: u64) -> PoisonSpec {
    PoisonSpec {
        budget_fraction: b,
        eps_p: eps,
        attack_kind: AttackKind::Gaussian,
        seed,
    }
}

fn blobs(dim: usize, per_class: usize, sep: f64, seed: u64) -> Split {
    make_blobs(4, dim, per_class, sep, seed).unwrap()
}

/// Rows outside `touched` are bit-identical to the clean data.
fn untouched_rows_identical(clean: &Dataset, view: &DatasetView) {
    for i in 0..clean.len() {
        if !view.poison.contains(&clean.ids()[i]) {
            assert_eq!(clean.row(i), view.data.row(i));
            assert_eq!(clean.target(i), view.data.target(i));
        }
    }
}

#[test]
fn gaussian_zero_noise_is_identity() {
    let s = blobs(5, 50, 3.0, 1);
    let (view, ledger) = gaussian_poison(&s.train, &gauss_spec(0.1, 0.0, 3)).unwrap();
    assert_eq!(view.data, s.train);
    assert_eq!(ledger.len(), 20);
    assert!(ledger.entries.values().all(|e| e.xi.iter().all(|&v| v == 0.0)));
}

#[test]
fn gaussian_count_ledger_and_labels() {
    let s = blobs(6, 100, 3.0, 2);
    let (view, ledger) = gaussian_poison(&s.train, &gauss_spec(0.05, 0.7, 9)).unwrap();
    assert_eq!(ledger.len(), 20);
    assert_eq!(view.poison, ledger.ids());
    for (id, e) in &ledger.entries {
        let i = view.data.index_of(*id).unwrap();
        assert_eq!(view.data.row(i), e.poisoned().as_slice());
        assert_eq!(s.train.row(i), e.base_x.as_slice());
        assert_eq!(view.data.target(i), s.train.target(i));
    }
    untouched_rows_identical(&s.train, &view);
}

#[test]
fn gaussian_pooled_noise_variance() {
    // b_p = 1.5% of 50000 gives 750 poisons; pooled variance within 5% of 0.32.
    let d = 16;
    let x = vec![0.0; 50_000 * d];
    let data = Dataset::with_sequential_ids(d, x, Labels::Values(vec![0.0; 50_000])).unwrap();
    let (_, ledger) = gaussian_poison(&data, &gauss_spec(0.015, 0.32f64.sqrt(), 5)).unwrap();
    assert_eq!(ledger.len(), 750);
    let all: Vec<f64> = ledger.entries.values().flat_map(|e| e.xi.clone()).collect();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (all.len() - 1) as f64;
    assert!((var - 0.32).abs() <= 0.05 * 0.32, "variance {var}");
}

#[test]
fn gaussian_poison_barely_moves_test_accuracy() {
    let s = make_blobs(4, 20, 250, 2.0, 4).unwrap();
    let (view, _) = gaussian_poison(&s.train, &gauss_spec(0.015, 0.32f64.sqrt(), 5)).unwrap();
    let spec = ModelSpec::logistic(20, 4);
    let optim = OptimConfig::sgd_momentum(0.05, 32, 10, 7);
    let (clean, _) = train(&spec, &s.train, &optim, LossKind::CrossEntropy).unwrap();
    let (pois, _) = train(&spec, &view.data, &optim, LossKind::CrossEntropy).unwrap();
    let a = test_accuracy(&clean, &s.test).unwrap();
    let b = test_accuracy(&pois, &s.test).unwrap();
    assert!((a - b).abs() <= 0.01, "clean {a} poisoned {b}");
}

#[test]
fn budget_below_one_sample_is_rejected() {
    let s = blobs(3, 10, 1.0, 1);
    assert!(gaussian_poison(&s.train, &gauss_spec(0.001, 0.1, 1)).is_err());
}

#[test]
fn perturbation_bound_rules() {
    assert!(PerturbationBound::unbounded().validate().is_ok());
    assert!(PerturbationBound::inf(0.5).validate().is_ok());
    let mut b = PerturbationBound::inf(0.5);
    b.radius = None;
    assert!(b.validate().is_err());
    let mut u = PerturbationBound::unbounded();
    u.radius = Some(1.0);
    assert!(u.validate().is_err());
    assert!(PerturbationBound::l2(1.0).scaled_by_std().validate().is_err());

    let data = Dataset::with_sequential_ids(2, vec![0.0, 0.0, 2.0, 4.0], Labels::Values(vec![0.0, 0.0])).unwrap();
    let p = PerturbationBound::inf(0.5).scaled_by_std().projector(&data).unwrap();
    let mut d = vec![3.0, -3.0];
    p.project(&mut d);
    // coordinate stds are 1 and 2
    assert_eq!(d, vec![0.5, -1.0]);
    let p = PerturbationBound::l2(1.0).projector(&data).unwrap();
    let mut d = vec![3.0, 4.0];
    p.project(&mut d);
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
}

fn gm_setup() -> (Split, ModelCheckpoint, TargetSpec) {
    let s = make_blobs(3, 6, 60, 2.0, 11).unwrap();
    let spec = ModelSpec::mlp(6, &[10], 3, Activation::Tanh);
    let (m, _) = train(&spec, &s.train, &OptimConfig::sgd_momentum(0.05, 16, 5, 3), LossKind::CrossEntropy).unwrap();
    let i = (0..s.test.len()).find(|&i| s.test.class(i) == Some(0)).unwrap();
    let target = TargetSpec {
        x_target: s.test.row(i).to_vec(),
        y_target: 0,
        y_adv: 1,
    };
    (s, m, target)
}

#[test]
fn gradient_matching_loss_decreases_and_respects_bound() {
    let (s, m, target) = gm_setup();
    let cfg = GradMatchConfig {
        restarts: 2,
        steps: 60,
        step_size: 0.01,
        bound: PerturbationBound::inf(0.5),
    };
    let spec = gauss_spec(0.05, 0.0, 2);
    let out = grad_match_poison(&m, &s.train, &target, &spec, &cfg).unwrap();
    assert_eq!(out.poison_ids.len(), 9);
    for trace in &out.phi_traces {
        assert!(trace.iter().all(|p| (0.0..=2.0).contains(p)));
    }
    let t0 = &out.phi_traces[0];
    assert!(t0.last().unwrap() < &t0[0], "{t0:?}");
    let best = out.phi_traces.iter().map(|t| *t.last().unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(out.phi, best);

    let projector = cfg.bound.projector(&s.train).unwrap();
    for &id in &out.poison_ids {
        let i = s.train.index_of(id).unwrap();
        assert_eq!(s.train.class(i), Some(1));
        let delta: Vec<f64> = out.view.data.row(i).iter().zip(s.train.row(i)).map(|(a, b)| a - b).collect();
        assert!(projector.contains(&delta, 1e-12));
    }
    untouched_rows_identical(&s.train, &out.view);

    // The reported loss agrees with a direct evaluation.
    let idx = out.view.poison_indices();
    let direct = matching_loss(&m, &out.view.data.matrix(&idx), &out.view.data.targets(&idx), &target).unwrap();
    assert!((direct - out.phi).abs() < 1e-12);
}

#[test]
fn gradient_matching_needs_enough_candidates() {
    let (s, m, target) = gm_setup();
    let cfg = GradMatchConfig {
        restarts: 1,
        steps: 1,
        step_size: 0.01,
        bound: PerturbationBound::inf(0.5),
    };
    // 40% of 180 samples is 72, but class 1 only has 60.
    let err = grad_match_poison(&m, &s.train, &target, &gauss_spec(0.4, 0.0, 1), &cfg).unwrap_err();
    assert!(matches!(err, poisonbench::Error::AttackFailure(_)));
    let bad = TargetSpec { y_adv: 0, ..target };
    assert!(grad_match_poison(&m, &s.train, &bad, &gauss_spec(0.05, 0.0, 1), &cfg).is_err());
}

#[test]
fn gradient_matching_is_deterministic() {
    let (s, m, target) = gm_setup();
    let cfg = GradMatchConfig {
        restarts: 3,
        steps: 10,
        step_size: 0.05,
        bound: PerturbationBound::l2(1.0),
    };
    let a = grad_match_poison(&m, &s.train, &target, &gauss_spec(0.05, 0.0, 4), &cfg).unwrap();
    let b = grad_match_poison(&m, &s.train, &target, &gauss_spec(0.05, 0.0, 4), &cfg).unwrap();
    assert_eq!(a.view, b.view);
    assert_eq!(a.phi_traces, b.phi_traces);
}

fn logistic_blobs() -> (Split, ModelCheckpoint) {
    let s = make_blobs(4, 5, 100, 3.0, 21).unwrap();
    let spec = ModelSpec::logistic(5, 4);
    let (m, _) = train(&spec, &s.train, &OptimConfig::sgd_momentum(0.05, 32, 20, 1), LossKind::CrossEntropy).unwrap();
    (s, m)
}

#[test]
fn param_corrupt_zero_radius_is_identity() {
    let (s, m) = logistic_blobs();
    let out = param_corrupt(&m, &s.train, &s.test, CorruptionRadius(0.0), 50).unwrap();
    assert_eq!(out.model, m);
    assert!(!out.success);
}

#[test]
fn param_corrupt_stays_in_ball_and_drops_accuracy() {
    let (s, m) = logistic_blobs();
    for eps in [0.5, 1.0, 4.0] {
        let out = param_corrupt(&m, &s.train, &s.test, CorruptionRadius(eps), 100).unwrap();
        assert!(out.model.distance_l2(&m) <= eps * (1.0 + 1e-12));
    }
    let out = param_corrupt(&m, &s.train, &s.test, CorruptionRadius(4.0), 100).unwrap();
    assert!(out.success);
    assert!(out.corrupt_score <= out.clean_score - 0.10, "{} -> {}", out.clean_score, out.corrupt_score);
}

/// One poison on 1-D linear regression with a bias. With clean mean gradient
/// `(c_w, c_b)` at `(w, b)`, the objective
/// `0.5 (c_w + r x)^2 + 0.5 (c_b + r)^2`, `r = w x + b - y`, vanishes exactly at
/// `x* = c_w / c_b` when the poison's label is `y = w x* + b + c_b`.
#[test]
fn grad_cancel_one_dimensional_oracle() {
    let (w, b) = (1.5, -0.3);
    let n = 10;
    let seed = 17;
    let p_idx = select_uniform(n, 1, seed).unwrap()[0];
    let xs: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 1.0).collect();
    let mut ys: Vec<f64> = xs.iter().map(|x| 0.8 * x + 0.5).collect();
    let (mut cw, mut cb) = (0.0, 0.0);
    for i in (0..n).filter(|&i| i != p_idx) {
        let r = w * xs[i] + b - ys[i];
        cw += r * xs[i];
        cb += r;
    }
    cw /= (n - 1) as f64;
    cb /= (n - 1) as f64;
    let x_star = cw / cb;
    ys[p_idx] = w * x_star + b + cb;
    let mut x = xs.clone();
    x[p_idx] = x_star + 0.4;
    let data = Dataset::with_sequential_ids(1, x, Labels::Values(ys)).unwrap();
    let model = ModelCheckpoint::new(ModelSpec::linear(1), vec![w, b]).unwrap();
    let spec = PoisonSpec {
        budget_fraction: 0.1,
        eps_p: 0.0,
        attack_kind: AttackKind::GradientCanceling,
        seed,
    };
    let out = grad_cancel(&model, &data, &spec, 0.1, 5000, &PerturbationBound::unbounded(), CancelWeighting::Mean).unwrap();
    assert!(out.final_objective <= 1e-10, "objective {}", out.final_objective);
    let got = out.view.data.row(p_idx)[0];
    assert!((got - x_star).abs() < 1e-4, "x {got} vs {x_star}");
}

#[test]
fn grad_cancel_initial_objective_matches_direct_evaluation() {
    let (s, m) = logistic_blobs();
    let spec = PoisonSpec {
        budget_fraction: 0.05,
        eps_p: 0.0,
        attack_kind: AttackKind::GradientCanceling,
        seed: 5,
    };
    let out = grad_cancel(&m, &s.train, &spec, 1.0, 3, &PerturbationBound::inf(0.2), CancelWeighting::Mean).unwrap();
    // Independent evaluation from per-set mean gradients.
    let pidx = s.train.indices_of(&out.poison_ids).unwrap();
    let cidx = s.train.indices_excluding(&out.poison_ids);
    let gc = param_grad(&m, &s.train, &cidx, LossKind::CrossEntropy).unwrap();
    let gp = param_grad(&m, &s.train, &pidx, LossKind::CrossEntropy).unwrap();
    let direct = 0.5 * gc.iter().zip(&gp).map(|(a, b)| (a + b).powi(2)).sum::<f64>();
    assert!((out.objective_trace[0] - direct).abs() <= 1e-12 * direct.max(1.0));
    for &i in &pidx {
        assert!(out.view.data.row(i).iter().zip(s.train.row(i)).all(|(a, b)| (a - b).abs() <= 0.2 + 1e-12));
    }
    untouched_rows_identical(&s.train, &out.view);
    let again = gc_objective(
        &m,
        &s.train.matrix(&cidx),
        &s.train.targets(&cidx),
        &out.view.data.matrix(&pidx),
        &out.view.data.targets(&pidx),
        CancelWeighting::Mean,
    )
    .unwrap();
    assert!((again - out.final_objective).abs() <= 1e-12 * again.max(1.0));
}

#[test]
fn grad_cancel_zero_epochs_keeps_clean_samples() {
    let (s, m) = logistic_blobs();
    let spec = PoisonSpec {
        budget_fraction: 0.05,
        eps_p: 0.0,
        attack_kind: AttackKind::GradientCanceling,
        seed: 5,
    };
    let out = grad_cancel(&m, &s.train, &spec, 0.1, 0, &PerturbationBound::unbounded(), CancelWeighting::Mass).unwrap();
    assert_eq!(out.view.data, s.train);
    assert!(out.objective_trace.is_empty());
    assert!(grad_cancel(&m, &s.train, &spec, 0.0, 1, &PerturbationBound::unbounded(), CancelWeighting::Mass).is_err());
}

#[test]
fn backdoor_empty_trigger_flips_labels_only() {
    let s = blobs(4, 50, 2.0, 3);
    let trig = Trigger {
        coords: vec![],
        values: vec![],
    };
    let spec = gauss_spec(0.1, 0.0, 8);
    let view = backdoor_trigger(&s.train, &trig, 2, &spec).unwrap();
    assert_eq!(view.poison.len(), 20);
    for i in 0..s.train.len() {
        assert_eq!(view.data.row(i), s.train.row(i));
        if view.poison.contains(&s.train.ids()[i]) {
            assert_eq!(view.data.class(i), Some(2));
        }
    }
    untouched_rows_identical(&s.train, &view);
}

#[test]
fn trigger_stamp_is_exact_and_checked() {
    let s = blobs(4, 10, 2.0, 3);
    let trig = Trigger {
        coords: vec![0, 3],
        values: vec![5.25, -1.0 / 3.0],
    };
    let stamped = trig.stamp_all(&s.test).unwrap();
    for i in 0..stamped.len() {
        assert_eq!(stamped.row(i)[0].to_bits(), 5.25f64.to_bits());
        assert_eq!(stamped.row(i)[3].to_bits(), (-1.0f64 / 3.0).to_bits());
        assert_eq!(stamped.row(i)[1], s.test.row(i)[1]);
    }
    let bad = Trigger {
        coords: vec![4],
        values: vec![1.0],
    };
    assert!(backdoor_trigger(&s.train, &bad, 1, &gauss_spec(0.1, 0.0, 1)).is_err());
}

#[test]
fn backdoor_is_learned() {
    let s = make_blobs(4, 10, 250, 3.0, 5).unwrap();
    let trig = Trigger {
        coords: vec![0, 1, 2],
        values: vec![6.0, -6.0, 6.0],
    };
    let view = backdoor_trigger(&s.train, &trig, 3, &gauss_spec(0.05, 0.0, 2)).unwrap();
    let spec = ModelSpec::mlp(10, &[32], 4, Activation::Relu);
    let (m, _) = train(&spec, &view.data, &OptimConfig::sgd_momentum(0.05, 32, 30, 3), LossKind::CrossEntropy).unwrap();
    let idx: Vec<usize> = (0..s.test.len()).filter(|&i| s.test.class(i) != Some(3)).collect();
    let triggered = trig.stamp_all(&s.test.subset(&idx)).unwrap();
    let pred = predict_classes(&m, &triggered.full_matrix()).unwrap();
    let hit = pred.iter().filter(|&&c| c == 3).count() as f64 / pred.len() as f64;
    assert!(hit >= 0.8, "trigger success {hit}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_touch_at_most_p_samples(seed in 0u64..1000, b in 0.02f64..0.3) {
        let s = blobs(3, 25, 2.0, seed);
        let n = s.train.len();
        let p = (b * n as f64).round() as usize;
        let (view, ledger) = gaussian_poison(&s.train, &gauss_spec(b, 0.5, seed)).unwrap();
        prop_assert_eq!(view.poison.len(), p);
        prop_assert_eq!(ledger.len(), p);
        untouched_rows_identical(&s.train, &view);
        let trig = Trigger { coords: vec![1], values: vec![9.0] };
        let bd = backdoor_trigger(&s.train, &trig, 0, &gauss_spec(b, 0.0, seed)).unwrap();
        prop_assert_eq!(bd.poison.len(), p);
        for &id in &bd.poison {
            let i = bd.data.index_of(id).unwrap();
            prop_assert_eq!(bd.data.class(i), Some(0));
        }
        untouched_rows_identical(&s.train, &bd);
        // Same seed, same attack.
        let (again, _) = gaussian_poison(&s.train, &gauss_spec(b, 0.5, seed)).unwrap();
        prop_assert_eq!(again, view);
    }

    #[test]
    fn selection_is_distinct(n in 1usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let p = (frac * n as f64) as usize;
        let chosen = select_uniform(n, p, seed).unwrap();
        let set: BTreeSet<usize> = chosen.iter().copied().collect();
        prop_assert_eq!(set.len(), p);
        prop_assert!(chosen.iter().all(|&i| i < n));
    }

    #[test]
    fn projection_lands_in_the_set(v in proptest::collection::vec(-10.0f64..10.0, 1..12), r in 0.0f64..3.0) {
        let d = v.len();
        let data = Dataset::with_sequential_ids(d, vec![0.0; d], Labels::Values(vec![0.0])).unwrap();
        for bound in [PerturbationBound::inf(r), PerturbationBound::l2(r), PerturbationBound::unbounded()] {
            let p = bound.projector(&data).unwrap();
            let mut x = v.clone();
            p.project(&mut x);
            prop_assert!(p.contains(&x, 1e-12));
            let mut y = x.clone();
            p.project(&mut y);
            prop_assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs())));
        }
    }
}

#[test]
fn matching_loss_of_identical_gradients_is_zero() {
    let (_, m, target) = gm_setup();
    // A single poison equal to the target with label y_adv has exactly the target gradient.
    let x = DMatrix::from_row_slice(1, 6, &target.x_target);
    let phi = matching_loss(&m, &x, &Targets::Classes(vec![target.y_adv]), &target).unwrap();
    assert!(phi.abs() < 1e-12);
}
