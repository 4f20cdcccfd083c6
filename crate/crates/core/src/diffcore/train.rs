use std::ops::Range;

use rand::seq::SliceRandom;

use super::model::{ModelCheckpoint, ModelSpec};
use super::optim::{OptimConfig, Optimizer};
use super::{loss_and_grad, LossKind};
use crate::datakit::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelCheckpoint,
    pub steps: usize,
    /// Minibatch loss before each step.
    pub loss_trace: Vec<f64>,
}

/// Train from the seeded initialization. Returns the model and the number of
/// minibatch steps taken (`epochs * ceil(n / batch_size)`).
pub fn train(spec: &ModelSpec, data: &Dataset, optim: &OptimConfig, loss: LossKind) -> Result<(ModelCheckpoint, usize)> {
    let init = ModelCheckpoint::init(spec.clone(), optim.seed)?;
    let out = continue_train(&init, data, optim, loss, usize::MAX)?;
    Ok((out.model, out.steps))
}

/// Like [`train`] but keeps the loss trace.
pub fn train_from(init: &ModelCheckpoint, data: &Dataset, optim: &OptimConfig, loss: LossKind) -> Result<TrainOutcome> {
    continue_train(init, data, optim, loss, usize::MAX)
}

/// Continue training from `model`, stopping after `min(epochs * ceil(n/bs), max_steps)` steps.
pub fn continue_train(
    model: &ModelCheckpoint,
    data: &Dataset,
    optim: &OptimConfig,
    loss: LossKind,
    max_steps: usize,
) -> Result<TrainOutcome> {
    let active = 0..model.params.len();
    descend(model, data, optim, loss, max_steps, active)
}

/// Shared descent engine restricted to an `active` parameter range.
pub(crate) fn descend(
    model: &ModelCheckpoint,
    data: &Dataset,
    optim: &OptimConfig,
    loss: LossKind,
    max_steps: usize,
    active: Range<usize>,
) -> Result<TrainOutcome> {
    let steps = optim.total_steps(data.len()).min(max_steps);
    let spec = model.spec.clone();
    let mut params = model.params.clone();
    let (taken, trace) = run_steps(&mut params, optim, data.len(), steps, active, |p, batch| {
        let x = data.matrix(batch);
        let t = data.targets(batch);
        loss_and_grad(&spec, p, &x, &t, loss)
    })?;
    Ok(TrainOutcome {
        model: ModelCheckpoint::new(spec, params)?,
        steps: taken,
        loss_trace: trace,
    })
}

/// Epoch-shuffled minibatch loop. Each epoch draws a fresh seeded permutation
/// of `0..n`; the last partial batch is kept. `step_fn` returns the minibatch
/// objective and its gradient at the current parameters.
pub(crate) fn run_steps<F>(
    params: &mut [f64],
    optim: &OptimConfig,
    n: usize,
    steps: usize,
    active: Range<usize>,
    mut step_fn: F,
) -> Result<(usize, Vec<f64>)>
where
    F: FnMut(&[f64], &[usize]) -> Result<(f64, Vec<f64>)>,
{
    optim.validate()?;
    if steps == 0 {
        return Ok((0, Vec::new()));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut opt = Optimizer::new(optim, params.len());
    let mut rng = rng::stream(optim.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(steps.min(1 << 20));
    let mut taken = 0;
    while taken < steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(optim.batch_size) {
            if taken == steps {
                break;
            }
            let (value, grad) = step_fn(params, batch)?;
            if !value.is_finite() {
                return Err(Error::Divergence { step: taken, what: "loss" });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step: taken, what: "gradient" });
            }
            opt.step(params, &grad, active.clone());
            if params[active.clone()].iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { step: taken, what: "parameters" });
            }
            trace.push(value);
            taken += 1;
        }
    }
    Ok((taken, trace))
}
