//! Differentiable predictors with exact parameter- and input-space gradients,
//! plus the minibatch training loop shared by training and unlearning.

mod engine;
pub mod io;
pub mod model;
pub mod optim;
pub mod train;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datakit::Dataset;
use crate::error::{Error, Result};

pub use engine::Targets;
pub use model::{Activation, ModelCheckpoint, ModelKind, ModelSpec};
pub use optim::{OptimConfig, Optimizer, OptimizerKind};
pub use train::{continue_train, train, train_from, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `0.5 * ||f(x) - y||^2`
    SquaredError,
    /// softmax cross-entropy; with soft targets this is KL(target || model)
    CrossEntropy,
}

impl LossKind {
    /// The loss paired with a model's output head.
    pub fn for_spec(spec: &ModelSpec) -> LossKind {
        if spec.is_classifier() {
            LossKind::CrossEntropy
        } else {
            LossKind::SquaredError
        }
    }
}

/// Supervision for a single sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    fn into_targets(self) -> Targets {
        match self {
            Target::Class(c) => Targets::Classes(vec![c]),
            Target::Value(v) => Targets::Values(vec![v]),
        }
    }
}

fn check(spec: &ModelSpec, x: &DMatrix<f64>, targets: &Targets, loss: LossKind) -> Result<()> {
    if x.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            got: x.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: targets.len(),
        });
    }
    match (loss, spec.is_classifier()) {
        (LossKind::CrossEntropy, false) => {
            return Err(Error::invalid("cross-entropy requires a classifier output"))
        }
        (LossKind::SquaredError, true) => {
            return Err(Error::invalid("squared error requires a regressor output"))
        }
        _ => {}
    }
    match targets {
        Targets::Classes(y) => {
            if !spec.is_classifier() {
                return Err(Error::invalid("class labels given to a regressor"));
            }
            if let Some(&bad) = y.iter().find(|&&c| c >= spec.output_dim) {
                return Err(Error::invalid(format!(
                    "class {bad} outside 0..{}",
                    spec.output_dim
                )));
            }
        }
        Targets::Values(_) => {
            if spec.is_classifier() || spec.output_dim != 1 {
                return Err(Error::invalid("real-valued labels need a scalar regressor"));
            }
        }
        Targets::Soft(m) => {
            if m.ncols() != spec.output_dim {
                return Err(Error::DimensionMismatch {
                    expected: spec.output_dim,
                    got: m.ncols(),
                });
            }
        }
    }
    Ok(())
}

fn check_params(spec: &ModelSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Model output for one input: class probabilities for classifiers, the
/// prediction for regressors.
pub fn forward(model: &ModelCheckpoint, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.spec.input_dim,
            got: x.len(),
        });
    }
    let m = DMatrix::from_row_slice(1, x.len(), x);
    Ok(predict(model, &m)?.row(0).iter().copied().collect())
}

/// Batched [`forward`]; one output row per input row.
pub fn predict(model: &ModelCheckpoint, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.spec.input_dim,
            got: x.ncols(),
        });
    }
    let tape = engine::Net::new(&model.spec, &model.params).forward(x);
    let out = tape.output();
    Ok(if model.spec.is_classifier() {
        engine::softmax_rows(out)
    } else {
        out.clone()
    })
}

/// Raw outputs before the softmax head (identical to [`predict`] for regressors).
pub fn logits(model: &ModelCheckpoint, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.spec.input_dim,
            got: x.ncols(),
        });
    }
    let tape = engine::Net::new(&model.spec, &model.params).forward(x);
    Ok(tape.output().clone())
}

/// Argmax class per row.
pub fn predict_classes(model: &ModelCheckpoint, x: &DMatrix<f64>) -> Result<Vec<usize>> {
    let out = logits(model, x)?;
    Ok((0..out.nrows()).map(|i| out.row(i).transpose().argmax().0).collect())
}

/// Per-sample losses.
pub fn sample_losses(model: &ModelCheckpoint, x: &DMatrix<f64>, targets: &Targets, loss: LossKind) -> Result<Vec<f64>> {
    check(&model.spec, x, targets, loss)?;
    let tape = engine::Net::new(&model.spec, &model.params).forward(x);
    Ok(engine::head(&model.spec, loss, tape.output(), targets).0)
}

/// Mean loss and its parameter gradient over a batch.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &[f64],
    x: &DMatrix<f64>,
    targets: &Targets,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    check(spec, x, targets, loss)?;
    check_params(spec, params)?;
    let n = x.nrows() as f64;
    let net = engine::Net::new(spec, params);
    let tape = net.forward(x);
    let (losses, mut delta) = engine::head(spec, loss, tape.output(), targets);
    delta /= n;
    let (grad, _) = net.backward(&tape, delta, true, false);
    Ok((losses.iter().sum::<f64>() / n, grad.expect("requested")))
}

/// Gradient of the mean loss over `idx` with respect to the parameters.
pub fn param_grad(model: &ModelCheckpoint, data: &Dataset, idx: &[usize], loss: LossKind) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let x = data.matrix(idx);
    let t = data.targets(idx);
    Ok(loss_and_grad(&model.spec, &model.params, &x, &t, loss)?.1)
}

/// Gradient of a single sample's loss with respect to its input.
pub fn input_grad(model: &ModelCheckpoint, x: &[f64], y: Target, loss: LossKind) -> Result<Vec<f64>> {
    if x.len() != model.spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.spec.input_dim,
            got: x.len(),
        });
    }
    let m = DMatrix::from_row_slice(1, x.len(), x);
    let g = input_grads(model, &m, &y.into_targets(), loss)?;
    Ok(g.row(0).iter().copied().collect())
}

/// Per-sample input gradients, one row per sample.
pub fn input_grads(model: &ModelCheckpoint, x: &DMatrix<f64>, targets: &Targets, loss: LossKind) -> Result<DMatrix<f64>> {
    check(&model.spec, x, targets, loss)?;
    let net = engine::Net::new(&model.spec, &model.params);
    let tape = net.forward(x);
    let (_, delta) = engine::head(&model.spec, loss, tape.output(), targets);
    Ok(net.backward(&tape, delta, false, true).1.expect("requested"))
}

/// Per-sample `grad_x <v, grad_theta loss(theta, x_i)>`: the input-space
/// gradient of a parameter-gradient inner product. Used by attacks that
/// shape the poisons' parameter gradients.
pub fn mixed_input_grads(
    spec: &ModelSpec,
    params: &[f64],
    x: &DMatrix<f64>,
    targets: &Targets,
    loss: LossKind,
    v: &[f64],
) -> Result<DMatrix<f64>> {
    check(spec, x, targets, loss)?;
    check_params(spec, params)?;
    check_params(spec, v)?;
    let net = engine::Net::new(spec, params);
    let tape = net.forward(x);
    Ok(net.mixed_input_grads(&tape, loss, targets, v))
}

/// Sum over samples of the squared per-sample parameter gradients.
pub fn squared_grad_sum(model: &ModelCheckpoint, x: &DMatrix<f64>, targets: &Targets, loss: LossKind) -> Result<Vec<f64>> {
    check(&model.spec, x, targets, loss)?;
    let net = engine::Net::new(&model.spec, &model.params);
    let tape = net.forward(x);
    let (_, delta) = engine::head(&model.spec, loss, tape.output(), targets);
    Ok(net.squared_grad_sum(&tape, delta))
}

/// Sum of per-sample parameter gradients (no averaging), used where batch
/// composition weights matter.
pub fn grad_sum(spec: &ModelSpec, params: &[f64], x: &DMatrix<f64>, targets: &Targets, loss: LossKind) -> Result<Vec<f64>> {
    let (_, mut g) = loss_and_grad(spec, params, x, targets, loss)?;
    let n = x.nrows() as f64;
    g.iter_mut().for_each(|v| *v *= n);
    Ok(g)
}
