//! Targeted clean-label poisoning by gradient matching.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ids_of, select_from, NormKind, PerturbationBound, Projector};
use crate::datakit::{Dataset, DatasetView, PoisonSpec};
use crate::diffcore::{grad_sum, loss_and_grad, mixed_input_grads, LossKind, ModelCheckpoint, Targets};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// A test point the attacker wants classified as `y_adv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub x_target: Vec<f64>,
    pub y_target: usize,
    pub y_adv: usize,
}

impl TargetSpec {
    pub fn validate(&self, dim: usize, classes: usize) -> Result<()> {
        if self.x_target.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.x_target.len(),
            });
        }
        if self.y_adv == self.y_target {
            return Err(Error::invalid("y_adv must differ from y_target"));
        }
        if self.y_adv >= classes || self.y_target >= classes {
            return Err(Error::invalid("target labels outside the class range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradMatchConfig {
    pub restarts: usize,
    pub steps: usize,
    /// Initial Adam step size; decays to zero on a cosine schedule.
    pub step_size: f64,
    pub bound: PerturbationBound,
}

impl GradMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.steps == 0 {
            return Err(Error::invalid("restarts and steps must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive"));
        }
        self.bound.validate()
    }
}

#[derive(Debug, Clone)]
pub struct GradMatchOutcome {
    pub view: DatasetView,
    pub poison_ids: BTreeSet<u64>,
    /// Matching loss of the returned perturbations.
    pub phi: f64,
    pub restart: usize,
    /// Per restart: the loss before each step, then the final loss.
    pub phi_traces: Vec<Vec<f64>>,
}

/// `1 - cos(grad of target loss under y_adv, grad of summed poison loss)`.
pub fn matching_loss(model: &ModelCheckpoint, poison_x: &DMatrix<f64>, poison_t: &Targets, target: &TargetSpec) -> Result<f64> {
    let gt = target_grad(model, target)?;
    let gp = grad_sum(&model.spec, &model.params, poison_x, poison_t, LossKind::CrossEntropy)?;
    Ok(phi_and_direction(&gt, &gp)?.0)
}

fn target_grad(model: &ModelCheckpoint, target: &TargetSpec) -> Result<Vec<f64>> {
    let x = DMatrix::from_row_slice(1, target.x_target.len(), &target.x_target);
    let t = Targets::Classes(vec![target.y_adv]);
    Ok(loss_and_grad(&model.spec, &model.params, &x, &t, LossKind::CrossEntropy)?.1)
}

/// The loss and its gradient with respect to the poison gradient `gp`.
fn phi_and_direction(gt: &[f64], gp: &[f64]) -> Result<(f64, Vec<f64>)> {
    let a = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    let b = gp.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = gt.iter().zip(gp).map(|(x, y)| x * y).sum();
    let phi = 1.0 - dot / (a * b);
    if !phi.is_finite() {
        return Err(Error::AttackFailure("gradient-matching loss is not finite".into()));
    }
    let dir = gt
        .iter()
        .zip(gp)
        .map(|(t, p)| -t / (a * b) + dot * p / (a * b * b * b))
        .collect();
    Ok((phi, dir))
}

/// Perturb `P` training samples of class `y_adv` so that their summed
/// parameter gradient aligns with the gradient that would push `x_target`
/// toward `y_adv`. Each restart runs Adam with a cosine-decayed step size and
/// projects onto the bound after every step; the restart with the smallest
/// final loss wins (ties go to the lower index).
pub fn grad_match_poison(
    clean_model: &ModelCheckpoint,
    data: &Dataset,
    target: &TargetSpec,
    spec: &PoisonSpec,
    cfg: &GradMatchConfig,
) -> Result<GradMatchOutcome> {
    cfg.validate()?;
    let classes = data
        .classes()
        .ok_or_else(|| Error::invalid("gradient matching needs a classification dataset"))?;
    target.validate(data.dim(), classes)?;
    let p = spec.poison_count(data.len())?;
    let candidates: Vec<usize> = (0..data.len()).filter(|&i| data.class(i) == Some(target.y_adv)).collect();
    if candidates.len() < p {
        return Err(Error::AttackFailure(format!(
            "{} samples of class {} available, {p} poisons needed",
            candidates.len(),
            target.y_adv
        )));
    }
    let chosen = select_from(candidates, p, spec.seed)?;
    let projector = cfg.bound.projector(data)?;
    let base = data.matrix(&chosen);
    let targets = data.targets(&chosen);
    let gt = target_grad(clean_model, target)?;

    let runs: Vec<Result<(DMatrix<f64>, Vec<f64>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.restarts)
            .map(|r| {
                let (base, targets, gt, projector) = (&base, &targets, &gt, &projector);
                s.spawn(move || {
                    let seed = rng::child_seed(spec.seed, r as u64);
                    one_restart(clean_model, base, targets, gt, projector, cfg, r, seed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("restart thread panicked")).collect()
    });

    let mut best: Option<(f64, usize, DMatrix<f64>)> = None;
    let mut traces = Vec::with_capacity(runs.len());
    for (r, run) in runs.into_iter().enumerate() {
        let (delta, trace) = run?;
        let phi = *trace.last().expect("trace holds the final loss");
        if best.as_ref().map_or(true, |(b, _, _)| phi < *b) {
            best = Some((phi, r, delta));
        }
        traces.push(trace);
    }
    let (phi, restart, delta) = best.expect("at least one restart");

    let mut out = data.clone();
    for (r, &i) in chosen.iter().enumerate() {
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = base[(r, j)] + delta[(r, j)];
        }
    }
    let poison_ids = ids_of(data, &chosen);
    Ok(GradMatchOutcome {
        view: DatasetView::with_poison(out, poison_ids.clone())?,
        poison_ids,
        phi,
        restart,
        phi_traces: traces,
    })
}

#[allow(clippy::too_many_arguments)]
fn one_restart(
    model: &ModelCheckpoint,
    base: &DMatrix<f64>,
    targets: &Targets,
    gt: &[f64],
    projector: &Projector,
    cfg: &GradMatchConfig,
    restart: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (p, d) = base.shape();
    let mut delta = DMatrix::<f64>::zeros(p, d);
    // Restart 0 starts from the clean samples; later restarts from a random
    // point of the admissible set.
    if restart > 0 {
        let mut rng = rng::stream(seed, Stream::Restart);
        for r in 0..p {
            let mut row: Vec<f64> = match projector.kind() {
                NormKind::Inf => projector.radii().iter().map(|&a| a * rng.random_range(-1.0..=1.0)).collect(),
                NormKind::L2 => {
                    let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let scale = projector.radius() * rng.random::<f64>() / n;
                    g.into_iter().map(|v| v * scale).collect()
                }
                NormKind::Unbounded => (0..d)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        0.1 * e
                    })
                    .collect(),
            };
            projector.project(&mut row);
            delta.row_mut(r).iter_mut().zip(&row).for_each(|(o, v)| *o = *v);
        }
    }

    let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    let mut m = DMatrix::<f64>::zeros(p, d);
    let mut v = DMatrix::<f64>::zeros(p, d);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let eval = |delta: &DMatrix<f64>| -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let xp = base + delta;
        let gp = grad_sum(&model.spec, &model.params, &xp, targets, LossKind::CrossEntropy)?;
        let (phi, dir) = phi_and_direction(gt, &gp)?;
        Ok((phi, dir, xp))
    };
    for t in 0..cfg.steps {
        let (phi, dir, xp) = eval(&delta)?;
        trace.push(phi);
        let g = mixed_input_grads(&model.spec, &model.params, &xp, targets, LossKind::CrossEntropy, &dir)?;
        let lr = cfg.step_size * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / cfg.steps as f64).cos());
        let k = (t + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        for r in 0..p {
            let mut row = vec![0.0; d];
            for (j, out) in row.iter_mut().enumerate() {
                let gi = g[(r, j)];
                m[(r, j)] = b1 * m[(r, j)] + (1.0 - b1) * gi;
                v[(r, j)] = b2 * v[(r, j)] + (1.0 - b2) * gi * gi;
                *out = delta[(r, j)] - lr * (m[(r, j)] / c1) / ((v[(r, j)] / c2).sqrt() + eps);
            }
            projector.project(&mut row);
            delta.row_mut(r).iter_mut().zip(&row).for_each(|(o, x)| *o = *x);
        }
    }
    trace.push(eval(&delta)?.0);
    Ok((delta, trace))
}
