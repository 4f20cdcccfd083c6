use poisonbench::attacks::gaussian_poison;
use poisonbench::datakit::*;
use poisonbench::diffcore::*;
use poisonbench::unlearn::*;
use poisonbench::Error;
use proptest::prelude::*;

struct Fixture {
    model: ModelCheckpoint,
    view: DatasetView,
    train_optim: OptimConfig,
    steps: usize,
}

fn fixture() -> Fixture {
    let s = make_blobs(3, 8, 80, 2.0, 3).unwrap();
    let ps = PoisonSpec {
        budget_fraction: 0.1,
        eps_p: 0.5,
        attack_kind: AttackKind::Gaussian,
        seed: 4,
    };
    let (view, ledger) = gaussian_poison(&s.train, &ps).unwrap();
    let view = partition_forget(&view, &ledger).unwrap();
    let spec = ModelSpec::mlp(8, &[12], 3, Activation::Tanh);
    let train_optim = OptimConfig::sgd_momentum(0.05, 16, 20, 1);
    let (model, steps) = train(&spec, &view.data, &train_optim, LossKind::CrossEntropy).unwrap();
    Fixture {
        model,
        view,
        train_optim,
        steps,
    }
}

fn request<'a>(f: &'a Fixture, optim: &'a OptimConfig, fraction: f64) -> UnlearnRequest<'a> {
    UnlearnRequest {
        model: &f.model,
        view: &f.view,
        train_optim: &f.train_optim,
        optim,
        budget: BudgetPolicy::new(fraction, f.steps).unwrap(),
    }
}

fn approximate_methods() -> Vec<Method> {
    vec![
        Method::Gd,
        Method::Ngd { sigma: 0.01 },
        Method::Ga,
        Method::Euk { k: 1 },
        Method::Cfk { k: 1 },
        Method::Scrub(ScrubConfig::default()),
        Method::NeggradPlus(NegGradConfig::default()),
        Method::Ssd(SsdConfig::default()),
    ]
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn delta(a: &ModelCheckpoint, b: &ModelCheckpoint) -> Vec<f64> {
    a.params.iter().zip(&b.params).map(|(x, y)| x - y).collect()
}

#[test]
fn budget_is_floored() {
    assert_eq!(BudgetPolicy::new(0.1, 939).unwrap().budget_steps(), 93);
    assert_eq!(BudgetPolicy::new(0.1, 9).unwrap().budget_steps(), 0);
    assert_eq!(BudgetPolicy::new(1.0, 7).unwrap().budget_steps(), 7);
    assert!(BudgetPolicy::new(0.0, 10).is_err());
    assert!(BudgetPolicy::new(1.5, 10).is_err());
}

#[test]
fn every_method_respects_the_budget() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 100, 2);
    let req = request(&f, &optim, 0.1);
    let budget = req.budget.budget_steps();
    assert_eq!(budget, f.steps / 10);
    for m in approximate_methods() {
        let out = unlearn(&req, &m).unwrap();
        assert!(out.grad_evals <= budget, "{} used {} of {budget}", m.name(), out.grad_evals);
        assert!(out.grad_evals > 0, "{}", m.name());
        assert_eq!(out.budget_steps, budget);
    }
}

#[test]
fn zero_budget_leaves_the_model_unchanged() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 5, 2);
    let req = UnlearnRequest {
        budget: BudgetPolicy::new(0.1, 5).unwrap(),
        ..request(&f, &optim, 0.1)
    };
    for m in [
        Method::Gd,
        Method::Ngd { sigma: 1.0 },
        Method::Ga,
        Method::Cfk { k: 2 },
        Method::Scrub(ScrubConfig::default()),
        Method::NeggradPlus(NegGradConfig::default()),
    ] {
        let out = unlearn(&req, &m).unwrap();
        assert_eq!(out.model, f.model, "{}", m.name());
        assert_eq!(out.grad_evals, 0);
    }
    // EUk still re-draws its layers, and SSD cannot afford its Fisher passes.
    let e = unlearn(&req, &Method::Euk { k: 1 }).unwrap();
    assert_eq!(e.grad_evals, 0);
    assert_eq!(e.model.params[frozen_prefix(&f.model, 1).unwrap()], f.model.params[frozen_prefix(&f.model, 1).unwrap()]);
    let err = unlearn(&req, &Method::Ssd(SsdConfig::default())).unwrap_err();
    assert!(matches!(err, Error::BudgetExceeded { .. }));
}

#[test]
fn zero_sigma_noisy_descent_is_plain_descent() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 3, 2);
    let req = request(&f, &optim, 0.1);
    let a = unlearn(&req, &Method::Gd).unwrap();
    let b = unlearn(&req, &Method::Ngd { sigma: 0.0 }).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn noise_pushes_descent_further_from_plain_descent() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 3, 2);
    let req = request(&f, &optim, 0.1);
    let gd = unlearn(&req, &Method::Gd).unwrap().model;
    let dist: Vec<f64> = [1e-3, 1e-2, 1e-1, 1.0]
        .iter()
        .map(|&sigma| unlearn(&req, &Method::Ngd { sigma }).unwrap().model.distance_l2(&gd))
        .collect();
    assert!(dist.windows(2).all(|w| w[0] < w[1]), "{dist:?}");
}

#[test]
fn gradient_ascent_raises_the_forget_loss() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 100, 2);
    let req = request(&f, &optim, 0.1);
    let forget = f.view.forget_set();
    let loss = |m: &ModelCheckpoint| {
        let l = sample_losses(m, &forget.full_matrix(), &forget.all_targets(), LossKind::CrossEntropy).unwrap();
        l.iter().sum::<f64>() / l.len() as f64
    };
    let out = unlearn(&req, &Method::Ga).unwrap();
    assert!(loss(&out.model) > loss(&f.model) + 0.1);
}

#[test]
fn last_k_methods_freeze_the_prefix() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 100, 2);
    let req = request(&f, &optim, 0.1);
    let frozen = frozen_prefix(&f.model, 1).unwrap();
    assert!(!frozen.is_empty());
    for m in [Method::Euk { k: 1 }, Method::Cfk { k: 1 }] {
        let out = unlearn(&req, &m).unwrap();
        assert_eq!(out.model.params[frozen.clone()], f.model.params[frozen.clone()]);
        assert_ne!(out.model.params[frozen.end..], f.model.params[frozen.end..]);
    }
}

#[test]
fn exact_unlearning_of_every_layer_is_training_from_scratch() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 100, 2);
    let req = request(&f, &optim, 0.1);
    let k = f.model.spec.layer_count();
    let out = unlearn(&req, &Method::Euk { k }).unwrap();
    let init = ModelCheckpoint::init(f.model.spec.clone(), optim.seed).unwrap();
    let direct = continue_train(&init, &f.view.retain_set(), &optim, LossKind::CrossEntropy, req.budget.budget_steps()).unwrap();
    assert_eq!(out.model, direct.model);
}

#[test]
fn retrain_on_an_empty_forget_set_is_training() {
    let f = fixture();
    let view = DatasetView::clean(f.view.data.clone());
    let optim = OptimConfig::sgd_momentum(0.01, 16, 1, 2);
    let req = UnlearnRequest {
        view: &view,
        ..request(&f, &optim, 0.1)
    };
    let out = unlearn(&req, &Method::Retrain).unwrap();
    assert_eq!(out.model, f.model);
    assert_eq!(out.grad_evals, f.steps);
    assert!(unlearn(&req, &Method::Gd).is_err());
}

#[test]
fn retrain_ignores_the_forget_set_entirely() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 1, 2);
    let req = request(&f, &optim, 0.1);
    let out = unlearn(&req, &Method::Retrain).unwrap();
    let (direct, _) = train(&f.model.spec, &f.view.retain_set(), &f.train_optim, LossKind::CrossEntropy).unwrap();
    assert_eq!(out.model, direct);
}

/// Runs `method` for exactly `t` steps by sizing the budget.
fn run_for(f: &Fixture, optim: &OptimConfig, method: &Method, t: usize, per_step: usize) -> ModelCheckpoint {
    let req = UnlearnRequest {
        budget: BudgetPolicy::new(1.0, t * per_step).unwrap(),
        ..request(f, optim, 0.1)
    };
    let out = unlearn(&req, method).unwrap();
    assert_eq!(out.steps, t);
    out.model
}

#[test]
fn scrub_without_teacher_terms_follows_descent() {
    let f = fixture();
    let optim = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::sgd_momentum(0.02, 16, 100, 5)
    };
    let scrub = Method::Scrub(ScrubConfig {
        alpha: 0.0,
        beta: 1.0,
        gamma: 0.0,
    });
    let mut prev_s = f.model.clone();
    let mut prev_g = f.model.clone();
    for t in 1..=15 {
        let s = run_for(&f, &optim, &scrub, t, 1);
        let g = run_for(&f, &optim, &Method::Gd, t, 1);
        let c = cosine(&delta(&s, &prev_s), &delta(&g, &prev_g));
        assert!(c >= 0.999, "step {t}: cosine {c}");
        prev_s = s;
        prev_g = g;
    }
    // A task weight of 2 at half the learning rate is the same step.
    let scaled = Method::Scrub(ScrubConfig {
        alpha: 0.0,
        beta: 2.0,
        gamma: 0.0,
    });
    let half = OptimConfig {
        learning_rate: optim.learning_rate / 2.0,
        ..optim.clone()
    };
    let a = run_for(&f, &half, &scaled, 10, 1);
    let b = run_for(&f, &optim, &Method::Gd, 10, 1);
    assert!(a.distance_l2(&b) <= 1e-12 * (1.0 + b.distance_l2(&f.model)));
}

#[test]
fn scrub_starts_at_zero_divergence() {
    let f = fixture();
    let optim = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::sgd_momentum(0.02, 16, 100, 5)
    };
    let req = request(&f, &optim, 0.1);
    let m = Method::Scrub(ScrubConfig {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    });
    let out = unlearn(&req, &m).unwrap();
    assert!(out.loss_trace[0].abs() < 1e-12, "{}", out.loss_trace[0]);
    // Zero gradient at the teacher, so a pure retain-KL step does not move.
    let one = run_for(&f, &optim, &m, 1, 1);
    assert!(one.distance_l2(&f.model) < 1e-12);
}

#[test]
fn neggrad_plus_full_batch_step() {
    let f = fixture();
    let n = f.view.data.len();
    let plain = OptimConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        batch_size: n,
        epochs: 1,
        seed: 0,
    };
    let beta = 0.7;
    let out = run_for(&f, &plain, &Method::NeggradPlus(NegGradConfig { beta }), 1, 2);
    let gr = param_grad(&f.model, &f.view.data, &f.view.retain_indices(), LossKind::CrossEntropy).unwrap();
    let gf = param_grad(&f.model, &f.view.data, &f.view.forget_indices(), LossKind::CrossEntropy).unwrap();
    for i in 0..gr.len() {
        let want = f.model.params[i] - 0.1 * (beta * gr[i] - (1.0 - beta) * gf[i]);
        assert!((out.params[i] - want).abs() < 1e-12);
    }
    // As beta approaches 1 the step turns into plain descent.
    let near = run_for(&f, &plain, &Method::NeggradPlus(NegGradConfig { beta: 0.9999 }), 1, 2);
    let gd = run_for(&f, &plain, &Method::Gd, 1, 1);
    assert!(cosine(&delta(&near, &f.model), &delta(&gd, &f.model)) > 0.9999);
}

#[test]
fn ssd_limits() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 1, 2);
    let req = request(&f, &optim, 0.5);
    for cfg in [
        SsdConfig { alpha: 1e300, ..SsdConfig::default() },
        SsdConfig { lambda: 1e300, ..SsdConfig::default() },
    ] {
        let out = unlearn(&req, &Method::Ssd(cfg)).unwrap();
        assert_eq!(out.model, f.model);
    }
    let mut last = usize::MAX;
    for alpha in [0.5, 1.0, 2.0, 5.0, 10.0, 50.0] {
        let out = unlearn(&req, &Method::Ssd(SsdConfig { alpha, ..SsdConfig::default() })).unwrap();
        let sel = out.selected.unwrap();
        assert!(sel <= last, "alpha {alpha}: {sel} > {last}");
        last = sel;
    }
    let tight = UnlearnRequest {
        budget: BudgetPolicy::new(1.0, 3).unwrap(),
        ..request(&f, &optim, 0.5)
    };
    assert!(matches!(
        unlearn(&tight, &Method::Ssd(SsdConfig::default())),
        Err(Error::BudgetExceeded { .. })
    ));
}

proptest! {
    #[test]
    fn dampening_only_shrinks_selected_entries(
        rows in proptest::collection::vec((-3.0f64..3.0, 0.0f64..2.0, 0.0f64..2.0), 1..40),
        alpha in 0.1f64..5.0,
        lambda in 0.1f64..5.0,
    ) {
        let params: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let i_u: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let i_s: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let cfg = SsdConfig { alpha, lambda, convention: AlphaConvention::AsWritten };
        let (out, selected) = dampen(&params, &i_u, &i_s, cfg);
        let mut count = 0;
        for i in 0..params.len() {
            if i_u[i] > alpha * i_s[i] {
                count += 1;
                prop_assert!(out[i].abs() <= params[i].abs());
                prop_assert_eq!(out[i].signum(), params[i].signum());
            } else {
                prop_assert_eq!(out[i], params[i]);
            }
        }
        prop_assert_eq!(selected, count);
        let recip = SsdConfig { alpha: 1.0 / alpha, convention: AlphaConvention::Reciprocal, ..cfg };
        let (again, _) = dampen(&params, &i_u, &i_s, recip);
        for i in 0..params.len() {
            prop_assert!((again[i] - out[i]).abs() <= 1e-12 * (1.0 + out[i].abs()) || (i_u[i] - alpha * i_s[i]).abs() < 1e-12);
        }
    }
}

/// Ridge regression is strongly convex, so descent on the retain set from the
/// trained model and retraining from scratch reach the same minimizer.
#[test]
fn convex_descent_reaches_the_retrained_optimum() {
    let spec = SynthRegressionSpec {
        n: 120,
        d: 6,
        informative_dims: 3,
        ..SynthRegressionSpec::reference(3)
    };
    let data = make_synth_regression(&spec).unwrap().data;
    let forget: std::collections::BTreeSet<u64> = data.ids()[..12].iter().copied().collect();
    let view = DatasetView::clean(data.clone()).with_forget(forget).unwrap();
    let plain = OptimConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.5,
        momentum: 0.0,
        weight_decay: 0.1,
        batch_size: data.len(),
        epochs: 2000,
        seed: 1,
    };
    let model_spec = ModelSpec::linear(data.dim());
    let (model, steps) = train(&model_spec, &data, &plain, LossKind::SquaredError).unwrap();
    let req = UnlearnRequest {
        model: &model,
        view: &view,
        train_optim: &plain,
        optim: &plain,
        budget: BudgetPolicy::new(1.0, steps).unwrap(),
    };
    let gd = unlearn(&req, &Method::Gd).unwrap().model;
    let rt = unlearn(&req, &Method::Retrain).unwrap().model;
    assert!(gd.distance_l2(&rt) <= 1e-2, "distance {}", gd.distance_l2(&rt));
    assert!(model.distance_l2(&rt) > 1e-2);
}

#[test]
fn method_validation() {
    assert!(Method::Ngd { sigma: -1.0 }.validate().is_err());
    assert!(Method::Euk { k: 0 }.validate().is_err());
    assert!(Method::NeggradPlus(NegGradConfig { beta: 1.0 }).validate().is_err());
    assert!(Method::Scrub(ScrubConfig { alpha: 0.0, beta: 0.0, gamma: 0.0 }).validate().is_err());
    assert!(Method::Ssd(SsdConfig { alpha: 0.0, ..SsdConfig::default() }).validate().is_err());
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 1, 2);
    let req = request(&f, &optim, 0.1);
    assert!(unlearn(&req, &Method::Euk { k: 5 }).is_err());
}

#[test]
fn unlearning_is_deterministic() {
    let f = fixture();
    let optim = OptimConfig::sgd_momentum(0.01, 16, 100, 2);
    let req = request(&f, &optim, 0.1);
    for m in approximate_methods() {
        let a = unlearn(&req, &m).unwrap();
        let b = unlearn(&req, &m).unwrap();
        assert_eq!(a.model, b.model, "{}", m.name());
        assert_eq!(a.loss_trace, b.loss_trace);
    }
}
