//! Indiscriminate poisoning: corrupt the parameters, then craft poisons that
//! make the corrupted parameters a stationary point of training.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ids_of, select_uniform, PerturbationBound};
use crate::datakit::{Dataset, DatasetView, Labels, PoisonSpec};
use crate::diffcore::{self, grad_sum, loss_and_grad, mixed_input_grads, LossKind, ModelCheckpoint, Targets};
use crate::error::{Error, Result};

/// L2 distance allowed between corrupted and trained parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRadius(pub f64);

#[derive(Debug, Clone)]
pub struct CorruptionOutcome {
    pub model: ModelCheckpoint,
    /// Test accuracy for classifiers, negative mean squared error for regressors.
    pub clean_score: f64,
    pub corrupt_score: f64,
    /// False when the corrupted parameters score no worse than the trained ones.
    pub success: bool,
}

/// Score used to judge a corruption: accuracy, or negative MSE for regressors.
pub(crate) fn quality(model: &ModelCheckpoint, eval: &Dataset) -> Result<f64> {
    let x = eval.full_matrix();
    match eval.labels() {
        Labels::Classes { labels, .. } => {
            let pred = diffcore::predict_classes(model, &x)?;
            let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
            Ok(hits as f64 / labels.len().max(1) as f64)
        }
        Labels::Values(_) => {
            let l = diffcore::sample_losses(model, &x, &eval.all_targets(), LossKind::SquaredError)?;
            Ok(-2.0 * l.iter().sum::<f64>() / l.len().max(1) as f64)
        }
    }
}

/// Projected normalized gradient ascent on the full training loss inside the
/// `eps_w` ball around `trained`. Each step moves `eps_w / 2` along the
/// normalized gradient.
pub fn param_corrupt(
    trained: &ModelCheckpoint,
    data: &Dataset,
    eval: &Dataset,
    radius: CorruptionRadius,
    steps: usize,
) -> Result<CorruptionOutcome> {
    let eps = radius.0;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid("corruption radius must be finite and nonnegative"));
    }
    let loss = LossKind::for_spec(&trained.spec);
    let x = data.full_matrix();
    let t = data.all_targets();
    let mut delta = vec![0.0; trained.params.len()];
    let mut params = trained.params.clone();
    if eps > 0.0 {
        for _ in 0..steps {
            let (_, g) = loss_and_grad(&trained.spec, &params, &x, &t, loss)?;
            let gn = norm(&g);
            if gn == 0.0 || !gn.is_finite() {
                break;
            }
            delta.iter_mut().zip(&g).for_each(|(d, gi)| *d += 0.5 * eps * gi / gn);
            let dn = norm(&delta);
            if dn > eps {
                delta.iter_mut().for_each(|d| *d *= eps / dn);
            }
            params.iter_mut().zip(&trained.params).zip(&delta).for_each(|((p, t), d)| *p = t + d);
        }
    }
    let model = ModelCheckpoint::new(trained.spec.clone(), params)?;
    let clean_score = quality(trained, eval)?;
    let corrupt_score = quality(&model, eval)?;
    Ok(CorruptionOutcome {
        model,
        clean_score,
        corrupt_score,
        success: corrupt_score < clean_score,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// How the clean and poison gradient sums are combined in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CancelWeighting {
    /// `mean clean gradient + mean poison gradient`.
    #[default]
    Mean,
    /// `(sum clean + sum poison) / P`: proportional to the gradient of the
    /// whole corrupted training set, so a zero makes `theta_corr` stationary
    /// for the actual training objective.
    Mass,
}

#[derive(Debug, Clone)]
pub struct CancelOutcome {
    pub view: DatasetView,
    pub poison_ids: BTreeSet<u64>,
    /// Objective before each epoch's update.
    pub objective_trace: Vec<f64>,
    pub final_objective: f64,
}

/// Gradient canceling. Poisons start as copies of uniformly drawn clean
/// samples (labels kept) and follow plain gradient descent with step `eta` on
/// `0.5 * ||G||^2`, where `G` combines the clean and poison parameter
/// gradients at `theta_corr`; every step is projected onto `bound`.
pub fn grad_cancel(
    theta_corr: &ModelCheckpoint,
    data: &Dataset,
    spec: &PoisonSpec,
    eta: f64,
    epochs: usize,
    bound: &PerturbationBound,
    weighting: CancelWeighting,
) -> Result<CancelOutcome> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("eta must be positive"));
    }
    let p = spec.poison_count(data.len())?;
    let chosen = select_uniform(data.len(), p, spec.seed)?;
    let poison_ids = ids_of(data, &chosen);
    let clean_idx = data.indices_excluding(&poison_ids);
    if clean_idx.is_empty() {
        return Err(Error::invalid("no clean samples left"));
    }
    let projector = bound.projector(data)?;
    let loss = LossKind::for_spec(&theta_corr.spec);
    let spec_m = &theta_corr.spec;
    let theta = &theta_corr.params;

    let gc = grad_sum(spec_m, theta, &data.matrix(&clean_idx), &data.targets(&clean_idx), loss)?;
    let (wc, wp) = match weighting {
        CancelWeighting::Mean => (1.0 / clean_idx.len() as f64, 1.0 / p as f64),
        CancelWeighting::Mass => (1.0 / p as f64, 1.0 / p as f64),
    };
    let base = data.matrix(&chosen);
    let targets = data.targets(&chosen);
    let mut delta = DMatrix::<f64>::zeros(p, data.dim());

    let combined = |xp: &DMatrix<f64>| -> Result<(f64, Vec<f64>)> {
        let gp = grad_sum(spec_m, theta, xp, &targets, loss)?;
        let g: Vec<f64> = gc.iter().zip(&gp).map(|(c, q)| wc * c + wp * q).collect();
        let obj = 0.5 * g.iter().map(|v| v * v).sum::<f64>();
        if !obj.is_finite() {
            return Err(Error::Divergence { step: 0, what: "gradient-canceling objective" });
        }
        Ok((obj, g))
    };

    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let xp = &base + &delta;
        let (obj, g) = combined(&xp).map_err(|e| relabel(e, epoch))?;
        trace.push(obj);
        let step = mixed_input_grads(spec_m, theta, &xp, &targets, loss, &g)?;
        delta -= step * (eta * wp);
        for r in 0..p {
            let mut row: Vec<f64> = delta.row(r).iter().copied().collect();
            projector.project(&mut row);
            delta.row_mut(r).iter_mut().zip(&row).for_each(|(d, v)| *d = *v);
        }
    }
    let xp = &base + &delta;
    let (final_objective, _) = combined(&xp).map_err(|e| relabel(e, epochs))?;

    let mut out = data.clone();
    for (r, &i) in chosen.iter().enumerate() {
        out.row_mut(i).iter_mut().zip(xp.row(r).iter()).for_each(|(o, v)| *o = *v);
    }
    Ok(CancelOutcome {
        view: DatasetView::with_poison(out, poison_ids.clone())?,
        poison_ids,
        objective_trace: trace,
        final_objective,
    })
}

fn relabel(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { what, .. } => Error::Divergence { step, what },
        other => other,
    }
}

/// `0.5 * ||w_c * sum clean grad + w_p * sum poison grad||^2` evaluated directly.
pub fn gc_objective(
    model: &ModelCheckpoint,
    clean_x: &DMatrix<f64>,
    clean_t: &Targets,
    poison_x: &DMatrix<f64>,
    poison_t: &Targets,
    weighting: CancelWeighting,
) -> Result<f64> {
    let loss = LossKind::for_spec(&model.spec);
    let (nc, np) = (clean_x.nrows() as f64, poison_x.nrows() as f64);
    let gc = grad_sum(&model.spec, &model.params, clean_x, clean_t, loss)?;
    let gp = grad_sum(&model.spec, &model.params, poison_x, poison_t, loss)?;
    let (wc, wp) = match weighting {
        CancelWeighting::Mean => (1.0 / nc, 1.0 / np),
        CancelWeighting::Mass => (1.0 / np, 1.0 / np),
    };
    Ok(0.5 * gc.iter().zip(&gp).map(|(c, q)| (wc * c + wp * q).powi(2)).sum::<f64>())
}
