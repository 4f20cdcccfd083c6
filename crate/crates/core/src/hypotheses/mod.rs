//! The two model-shift experiments: how far poisons move a convex model's
//! optimum compared with clean samples, and whether that shift is visible to
//! gradient descent on clean data.

mod convex;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{grad_cancel, param_corrupt, CancelWeighting, CorruptionRadius, PerturbationBound};
use crate::datakit::{make_synth_regression, AttackKind, Dataset, DatasetView, PoisonSpec, SynthRegressionSpec};
use crate::diffcore::train::run_steps;
use crate::diffcore::{loss_and_grad, LossKind, ModelCheckpoint, ModelKind, ModelSpec, OptimConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::evaluate::{mean, variance};
use crate::rng::{self, Stream};

pub use convex::{fit_ridge_logistic, fit_ridge_regression, penalized_grad, RidgeSystem};

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

/// How convex models are fit in the shift experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Fractions of the removed set, in (0, 1], sorted ascending.
    pub betas: Vec<f64>,
    /// Size of the random clean set; `None` matches the poison count.
    #[serde(default)]
    pub random_count: Option<usize>,
    /// Ridge penalty on the weights.
    pub lambda: f64,
    /// Gradient-norm tolerance for each fit.
    pub tol: f64,
    pub max_iters: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftGrid {
    pub betas: Vec<f64>,
    /// Number of samples removed at each beta.
    pub removed: Vec<usize>,
    /// `||theta(S_corr) - theta(S_corr \ S^beta)||_1`
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub poison: ShiftGrid,
    pub random: ShiftGrid,
}

fn fit_convex(spec: &ModelSpec, data: &Dataset, cfg: &ShiftConfig, init: &[f64]) -> Result<Vec<f64>> {
    match spec.kind {
        ModelKind::LinearRegressor => fit_ridge_regression(data, cfg.lambda),
        ModelKind::LogisticClassifier => fit_ridge_logistic(spec, data, cfg.lambda, init, cfg.tol, cfg.max_iters),
        ModelKind::Mlp => Err(Error::invalid("the shift experiment needs a convex model")),
    }
}

/// Remove growing prefixes (a fraction `beta` of each set) of a seeded order
/// of the poisons, and of an equally sized (or configured) random clean set,
/// and measure how far the refit optimum moves from `theta(S_corr)`.
pub fn model_shift_experiment(spec: &ModelSpec, corrupted: &DatasetView, cfg: &ShiftConfig) -> Result<ShiftReport> {
    if cfg.betas.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) || cfg.betas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("betas must be sorted and lie in (0, 1]"));
    }
    if corrupted.poison.is_empty() {
        return Err(Error::invalid("no poisons to unlearn"));
    }
    let data = &corrupted.data;
    let mut rng = rng::stream(cfg.seed, Stream::Subset);
    let mut poisons = corrupted.poison_indices();
    poisons.shuffle(&mut rng);
    let mut clean = corrupted.clean_indices();
    clean.shuffle(&mut rng);
    let r = cfg.random_count.unwrap_or(poisons.len());
    if r > clean.len() {
        return Err(Error::invalid("random set larger than the clean set"));
    }
    clean.truncate(r);

    let zero = vec![0.0; spec.param_count()];
    let theta_corr = fit_convex(spec, data, cfg, &zero)?;
    let curve = |order: &[usize]| -> Result<ShiftGrid> {
        let mut grid = ShiftGrid {
            betas: cfg.betas.clone(),
            removed: Vec::new(),
            distances: Vec::new(),
        };
        for &b in &cfg.betas {
            let k = (b * order.len() as f64).round() as usize;
            let dist = if k == 0 {
                0.0
            } else {
                let gone: BTreeSet<u64> = order[..k].iter().map(|&i| data.ids()[i]).collect();
                let kept = data.subset(&data.indices_excluding(&gone));
                l1_distance(&theta_corr, &fit_convex(spec, &kept, cfg, &theta_corr)?)
            };
            grid.removed.push(k);
            grid.distances.push(dist);
        }
        Ok(grid)
    };
    Ok(ShiftReport {
        poison: curve(&poisons)?,
        random: curve(&clean)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub poisons: usize,
    /// Corruption radius for the parameter-corruption step.
    pub eps_w: f64,
    pub corrupt_steps: usize,
    pub gc_eta: f64,
    pub gc_epochs: usize,
    #[serde(default)]
    pub gc_weighting: CancelWeighting,
    /// Ridge penalty used for every fit. A small penalty keeps the
    /// near-degenerate tail coordinates from dominating the shift.
    pub lambda: f64,
    /// Starting size for the random clean set.
    pub random_start: usize,
    /// Relative tolerance when matching the random set's l1 shift to the poisons'.
    pub match_tolerance: f64,
    pub gd_learning_rate: f64,
    pub gd_batch_size: usize,
    pub gd_steps: usize,
    /// Independent poison initializations.
    pub replicates: usize,
    pub seed: u64,
}

impl AlignmentConfig {
    pub fn reference(seed: u64) -> Self {
        AlignmentConfig {
            poisons: 1000,
            eps_w: 1.0,
            corrupt_steps: 100,
            gc_eta: 0.1,
            gc_epochs: 500,
            gc_weighting: CancelWeighting::Mean,
            lambda: 5e-3,
            random_start: 3200,
            match_tolerance: 0.1,
            gd_learning_rate: 1e-3,
            gd_batch_size: 64,
            gd_steps: 200,
            replicates: 5,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReplicate {
    pub poison_l1: f64,
    pub random_l1: f64,
    pub random_count: usize,
    /// Whether the random shift landed within the matching tolerance.
    pub matched: bool,
    pub cos_blue: Vec<f64>,
    pub cos_red: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub replicates: Vec<AlignmentReplicate>,
    /// Per-step cosine averaged over replicates.
    pub mean_cos_blue: Vec<f64>,
    pub mean_cos_red: Vec<f64>,
    /// Mean over steps and replicates of |cos|, with the across-replicate
    /// standard deviation of the per-replicate means.
    pub mean_abs_blue: f64,
    pub std_abs_blue: f64,
    pub mean_abs_red: f64,
    pub std_abs_red: f64,
}

/// Two-teacher regression, gradient-canceling poisons, and gradient descent on
/// the clean retain set from `theta(S_corr)`. Each step's minibatch gradient
/// is compared with `v_blue = theta(S_corr) - theta(S_corr \ S_pois)` and
/// `v_red = theta(S_corr \ S_rand) - theta(S_corr \ S_pois)`, where `S_rand`
/// is a random set of clean `w_2`-labelled samples sized so that removing it
/// moves the optimum as far (in l1) as removing the poisons.
pub fn alignment_experiment(spec: &SynthRegressionSpec, cfg: &AlignmentConfig) -> Result<AlignmentReport> {
    if cfg.replicates == 0 || cfg.gd_steps == 0 {
        return Err(Error::invalid("need at least one replicate and one step"));
    }
    let synth = make_synth_regression(spec)?;
    let data = &synth.data;
    let clean_system = RidgeSystem::new(data)?;
    let theta_train = clean_system.solve(cfg.lambda)?;
    let model_spec = ModelSpec::linear(data.dim());
    let trained = ModelCheckpoint::new(model_spec.clone(), theta_train)?;
    let corrupt = param_corrupt(&trained, data, data, CorruptionRadius(cfg.eps_w), cfg.corrupt_steps)?;

    let mut replicates = Vec::with_capacity(cfg.replicates);
    for r in 0..cfg.replicates {
        let seed = rng::child_seed(cfg.seed, r as u64);
        replicates.push(alignment_replicate(data, &clean_system, &corrupt.model, cfg, seed)?);
    }
    let steps = cfg.gd_steps;
    let avg = |f: &dyn Fn(&AlignmentReplicate) -> &Vec<f64>| -> Vec<f64> {
        (0..steps).map(|t| mean(&replicates.iter().map(|rep| f(rep)[t]).collect::<Vec<_>>())).collect()
    };
    let abs_means = |f: &dyn Fn(&AlignmentReplicate) -> &Vec<f64>| -> Vec<f64> {
        replicates
            .iter()
            .map(|rep| mean(&f(rep).iter().map(|c| c.abs()).collect::<Vec<_>>()))
            .collect()
    };
    let blue = abs_means(&|r| &r.cos_blue);
    let red = abs_means(&|r| &r.cos_red);
    Ok(AlignmentReport {
        mean_cos_blue: avg(&|r| &r.cos_blue),
        mean_cos_red: avg(&|r| &r.cos_red),
        mean_abs_blue: mean(&blue),
        std_abs_blue: variance(&blue).sqrt(),
        mean_abs_red: mean(&red),
        std_abs_red: variance(&red).sqrt(),
        replicates,
    })
}

fn alignment_replicate(
    data: &Dataset,
    clean_system: &RidgeSystem,
    theta_c: &ModelCheckpoint,
    cfg: &AlignmentConfig,
    seed: u64,
) -> Result<AlignmentReplicate> {
    let n = data.len();
    let poison_spec = PoisonSpec {
        budget_fraction: cfg.poisons as f64 / n as f64,
        eps_p: 0.0,
        attack_kind: AttackKind::GradientCanceling,
        seed,
    };
    let gc = grad_cancel(
        theta_c,
        data,
        &poison_spec,
        cfg.gc_eta,
        cfg.gc_epochs,
        &PerturbationBound::unbounded(),
        cfg.gc_weighting,
    )?;
    let corrupted = &gc.view.data;
    let pidx = gc.view.poison_indices();

    // S_corr \ S_pois is the clean data minus the poisons' base rows.
    let mut without_pois = clean_system.clone();
    without_pois.remove(data, &pidx)?;
    let theta_clean = without_pois.solve(cfg.lambda)?;
    let mut corr_system = without_pois.clone();
    corr_system.add(corrupted, &pidx)?;
    let theta_corr = corr_system.solve(cfg.lambda)?;
    let poison_l1 = l1_distance(&theta_corr, &theta_clean);

    // Random clean w2-half samples in a seeded order; prefixes are nested.
    let mut cand: Vec<usize> = (n / 2..n).filter(|i| !gc.poison_ids.contains(&data.ids()[*i])).collect();
    cand.shuffle(&mut rng::stream(seed, Stream::Subset));
    let shift_of = |m: usize| -> Result<(f64, Vec<f64>)> {
        let mut s = corr_system.clone();
        s.remove(corrupted, &cand[..m])?;
        let th = s.solve(cfg.lambda)?;
        Ok((l1_distance(&theta_corr, &th), th))
    };
    let within = |v: f64| (v - poison_l1).abs() <= cfg.match_tolerance * poison_l1;
    let mut m = cfg.random_start.clamp(1, cand.len());
    let (mut lo, mut hi) = (1, cand.len());
    let (mut best_m, mut best) = (m, (f64::INFINITY, Vec::new()));
    for _ in 0..40 {
        let (v, th) = shift_of(m)?;
        if (v - poison_l1).abs() < (best.0 - poison_l1).abs() {
            best = (v, th.clone());
            best_m = m;
        }
        if within(v) {
            best = (v, th);
            best_m = m;
            break;
        }
        if v > poison_l1 {
            hi = m.saturating_sub(1).max(lo);
        } else {
            lo = (m + 1).min(hi);
        }
        if lo >= hi {
            m = lo;
            let (v, th) = shift_of(m)?;
            if (v - poison_l1).abs() < (best.0 - poison_l1).abs() {
                best = (v, th);
                best_m = m;
            }
            break;
        }
        m = lo + (hi - lo) / 2;
    }
    let (random_l1, theta_random) = best;

    let v_blue: Vec<f64> = theta_corr.iter().zip(&theta_clean).map(|(a, b)| a - b).collect();
    let v_red: Vec<f64> = theta_random.iter().zip(&theta_clean).map(|(a, b)| a - b).collect();

    let retain = data.subset(&data.indices_excluding(&gc.poison_ids));
    let optim = OptimConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: cfg.gd_learning_rate,
        momentum: 0.0,
        weight_decay: 0.0,
        batch_size: cfg.gd_batch_size,
        epochs: usize::MAX / (retain.len() + 1),
        seed,
    };
    let spec = ModelSpec::linear(data.dim());
    let mut params = theta_corr.clone();
    let (mut cos_blue, mut cos_red) = (Vec::new(), Vec::new());
    let active = 0..params.len();
    run_steps(&mut params, &optim, retain.len(), cfg.gd_steps, active, |p, batch| {
        let (l, mut g) = loss_and_grad(&spec, p, &retain.matrix(batch), &retain.targets(batch), LossKind::SquaredError)?;
        convex::add_ridge(&spec, p, &mut g, cfg.lambda);
        cos_blue.push(cosine(&v_blue, &g)?);
        cos_red.push(cosine(&v_red, &g)?);
        Ok((l, g))
    })?;
    Ok(AlignmentReplicate {
        poison_l1,
        random_l1,
        random_count: best_m,
        matched: within(random_l1),
        cos_blue,
        cos_red,
    })
}
