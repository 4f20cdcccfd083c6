//! The retraining oracle and eight approximate unlearning methods.
//!
//! Every approximate method is charged in minibatch gradient evaluations and
//! may not exceed `floor(fraction * training_steps)` of them. Methods that
//! touch the retain and forget sets in the same step pay for both passes.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, DatasetView, Labels};
use crate::diffcore::train::{descend, run_steps};
use crate::diffcore::{self, loss_and_grad, squared_grad_sum, LossKind, ModelCheckpoint, OptimConfig, Targets};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub fraction: f64,
    pub training_steps: usize,
}

impl BudgetPolicy {
    pub fn new(fraction: f64, training_steps: usize) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid("budget fraction must lie in (0, 1]"));
        }
        Ok(BudgetPolicy {
            fraction,
            training_steps,
        })
    }

    /// `floor(fraction * training_steps)`
    pub fn budget_steps(&self) -> usize {
        (self.fraction * self.training_steps as f64).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrubConfig {
    /// weight of the retain-set KL to the teacher
    pub alpha: f64,
    /// weight of the retain-set task loss
    pub beta: f64,
    /// weight of the (subtracted) forget-set KL to the teacher
    pub gamma: f64,
}

impl Default for ScrubConfig {
    fn default() -> Self {
        ScrubConfig {
            alpha: 0.999,
            beta: 0.001,
            gamma: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegGradConfig {
    pub beta: f64,
}

impl Default for NegGradConfig {
    fn default() -> Self {
        NegGradConfig { beta: 0.999 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaConvention {
    /// select when `I_U > alpha * I_S`
    #[default]
    AsWritten,
    /// select when `I_U > I_S / alpha`
    Reciprocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub alpha: f64,
    pub lambda: f64,
    #[serde(default)]
    pub convention: AlphaConvention,
}

impl Default for SsdConfig {
    fn default() -> Self {
        SsdConfig {
            alpha: 10.0,
            lambda: 1.0,
            convention: AlphaConvention::AsWritten,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    Retrain,
    Gd,
    Ngd { sigma: f64 },
    Ga,
    Euk { k: usize },
    Cfk { k: usize },
    Scrub(ScrubConfig),
    NeggradPlus(NegGradConfig),
    Ssd(SsdConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::Gd => "gd",
            Method::Ngd { .. } => "ngd",
            Method::Ga => "ga",
            Method::Euk { .. } => "euk",
            Method::Cfk { .. } => "cfk",
            Method::Scrub(_) => "scrub",
            Method::NeggradPlus(_) => "neggrad-plus",
            Method::Ssd(_) => "ssd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Method::Ngd { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::invalid("ngd sigma must be finite and nonnegative"))
            }
            Method::Euk { k } | Method::Cfk { k } if k == 0 => Err(Error::invalid("k must be at least 1")),
            Method::Scrub(c) => {
                if [c.alpha, c.beta, c.gamma].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err(Error::invalid("scrub weights must be finite and nonnegative"));
                }
                if c.alpha == 0.0 && c.beta == 0.0 && c.gamma == 0.0 {
                    return Err(Error::invalid("scrub weights cannot all be zero"));
                }
                Ok(())
            }
            Method::NeggradPlus(c) if !(c.beta > 0.0 && c.beta < 1.0) => {
                Err(Error::invalid("neggrad+ beta must lie in (0, 1)"))
            }
            Method::Ssd(c) if !(c.alpha > 0.0 && c.lambda > 0.0) => {
                Err(Error::invalid("ssd alpha and lambda must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Everything an unlearner needs.
#[derive(Debug, Clone, Copy)]
pub struct UnlearnRequest<'a> {
    /// The model trained on the full (corrupted) training set.
    pub model: &'a ModelCheckpoint,
    pub view: &'a DatasetView,
    /// The original training configuration; the retraining oracle reuses it.
    pub train_optim: &'a OptimConfig,
    /// Optimizer for the approximate methods. Its epoch count sets the
    /// requested number of steps before the budget cap.
    pub optim: &'a OptimConfig,
    pub budget: BudgetPolicy,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: ModelCheckpoint,
    /// Optimizer steps applied.
    pub steps: usize,
    /// Minibatch gradient evaluations charged against the budget.
    pub grad_evals: usize,
    pub budget_steps: usize,
    /// Objective before each step (methods that take steps).
    pub loss_trace: Vec<f64>,
    /// Number of parameters dampened (SSD only).
    pub selected: Option<usize>,
}

/// Run one method.
pub fn unlearn(req: &UnlearnRequest, method: &Method) -> Result<UnlearnOutcome> {
    method.validate()?;
    if req.view.forget.is_empty() && *method != Method::Retrain {
        return Err(Error::invalid("the forget set is empty"));
    }
    if req.view.forget.len() >= req.view.data.len() {
        return Err(Error::invalid("the retain set is empty"));
    }
    match *method {
        Method::Retrain => retrain(req),
        Method::Gd => ngd(req, 0.0),
        Method::Ngd { sigma } => ngd(req, sigma),
        Method::Ga => ga(req),
        Method::Euk { k } => last_k(req, k, true),
        Method::Cfk { k } => last_k(req, k, false),
        Method::Scrub(c) => scrub(req, c),
        Method::NeggradPlus(c) => neggrad_plus(req, c),
        Method::Ssd(c) => ssd(req, c),
    }
}

fn loss_of(req: &UnlearnRequest) -> LossKind {
    LossKind::for_spec(&req.model.spec)
}

/// Exact unlearning: fresh seeded initialization, full training on the retain
/// set. Exempt from the budget; its consumption is the full training run.
pub fn retrain(req: &UnlearnRequest) -> Result<UnlearnOutcome> {
    let retain = req.view.retain_set();
    let init = ModelCheckpoint::init(req.model.spec.clone(), req.train_optim.seed)?;
    let out = descend(&init, &retain, req.train_optim, loss_of(req), usize::MAX, 0..init.params.len())?;
    Ok(UnlearnOutcome {
        model: out.model,
        steps: out.steps,
        grad_evals: out.steps,
        budget_steps: req.budget.budget_steps(),
        loss_trace: out.loss_trace,
        selected: None,
    })
}

/// Gradient descent on the retain set, `min(requested, budget)` steps.
pub fn gd(req: &UnlearnRequest) -> Result<UnlearnOutcome> {
    ngd(req, 0.0)
}

/// Noisy gradient descent: `g_t + xi_t`, `xi_t ~ N(0, sigma^2 I)`. With
/// `sigma = 0` no noise is drawn, so the result is bit-identical to [`gd`].
pub fn ngd(req: &UnlearnRequest, sigma: f64) -> Result<UnlearnOutcome> {
    let retain = req.view.retain_set();
    let loss = loss_of(req);
    let steps = req.optim.total_steps(retain.len()).min(req.budget.budget_steps());
    let spec = req.model.spec.clone();
    let mut params = req.model.params.clone();
    let mut noise = rng::stream(req.optim.seed, Stream::GradientNoise);
    let active = 0..params.len();
    let (taken, trace) = run_steps(&mut params, req.optim, retain.len(), steps, active, |p, batch| {
        let (l, mut g) = loss_and_grad(&spec, p, &retain.matrix(batch), &retain.targets(batch), loss)?;
        if sigma > 0.0 {
            for gi in g.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut noise);
                *gi += sigma * e;
            }
        }
        Ok((l, g))
    })?;
    finish(req, spec, params, taken, taken, trace, None)
}

/// Gradient ascent on the forget-set loss only.
pub fn ga(req: &UnlearnRequest) -> Result<UnlearnOutcome> {
    let forget = req.view.forget_set();
    let loss = loss_of(req);
    let steps = req.optim.total_steps(forget.len()).min(req.budget.budget_steps());
    let spec = req.model.spec.clone();
    let mut params = req.model.params.clone();
    let active = 0..params.len();
    let (taken, trace) = run_steps(&mut params, req.optim, forget.len(), steps, active, |p, batch| {
        let (l, g) = loss_and_grad(&spec, p, &forget.matrix(batch), &forget.targets(batch), loss)?;
        Ok((-l, g.into_iter().map(|v| -v).collect()))
    })?;
    finish(req, spec, params, taken, taken, trace, None)
}

/// Train only the last `k` layers on the retain set; `reinit` re-draws them
/// first (EUk), otherwise they continue from the trained values (CFk).
fn last_k(req: &UnlearnRequest, k: usize, reinit: bool) -> Result<UnlearnOutcome> {
    let range = req.model.spec.trailing_range(k)?;
    let mut start = req.model.clone();
    if reinit {
        start.reinit_trailing(k, req.optim.seed)?;
    }
    let retain = req.view.retain_set();
    let out = descend(&start, &retain, req.optim, loss_of(req), req.budget.budget_steps(), range)?;
    finish(req, out.model.spec, out.model.params, out.steps, out.steps, out.loss_trace, None)
}

pub fn euk(req: &UnlearnRequest, k: usize) -> Result<UnlearnOutcome> {
    last_k(req, k, true)
}

pub fn cfk(req: &UnlearnRequest, k: usize) -> Result<UnlearnOutcome> {
    last_k(req, k, false)
}

/// Endless sequence of forget-set minibatches: a fresh seeded permutation per
/// pass, last partial batch kept.
struct ForgetBatches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: rng::Rng,
}

impl ForgetBatches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        ForgetBatches {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng: rng::stream(seed, Stream::ForgetBatches),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

fn one_hot_or_values(data: &Dataset, batch: &[usize], width: usize) -> DMatrix<f64> {
    match data.labels() {
        Labels::Classes { labels, .. } => DMatrix::from_fn(batch.len(), width, |r, c| f64::from(u8::from(labels[batch[r]] == c))),
        Labels::Values(v) => DMatrix::from_fn(batch.len(), 1, |r, _| v[batch[r]]),
    }
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

/// Student-teacher unlearning: minimize
/// `alpha * KL_retain + beta * loss_retain - gamma * KL_forget`, with KL taken
/// from the frozen teacher's predictive distribution to the student's.
///
/// The two retain terms share a minibatch and collapse into one soft-target
/// pass: `alpha (p - q) + beta (p - y) = (alpha + beta) (p - t)` with
/// `t = (alpha q + beta y) / (alpha + beta)`.
pub fn scrub(req: &UnlearnRequest, cfg: ScrubConfig) -> Result<UnlearnOutcome> {
    let retain = req.view.retain_set();
    let forget = req.view.forget_set();
    let loss = loss_of(req);
    let spec = req.model.spec.clone();
    let teacher_r = diffcore::predict(req.model, &retain.full_matrix())?;
    let teacher_f = diffcore::predict(req.model, &forget.full_matrix())?;
    let w_r = cfg.alpha + cfg.beta;
    let uses_retain = w_r > 0.0;
    let uses_forget = cfg.gamma > 0.0;
    let per_step = usize::from(uses_retain) + usize::from(uses_forget);
    let steps = req.optim.total_steps(retain.len()).min(req.budget.budget_steps() / per_step);
    let mut forget_batches = ForgetBatches::new(forget.len(), req.optim.batch_size, req.optim.seed);
    let mut params = req.model.params.clone();
    let active = 0..params.len();
    let (taken, trace) = run_steps(&mut params, req.optim, retain.len(), steps, active, |p, batch| {
        let mut value = 0.0;
        let mut grad = vec![0.0; p.len()];
        if uses_retain {
            let q = rows(&teacher_r, batch);
            let y = one_hot_or_values(&retain, batch, q.ncols());
            let t = (q * cfg.alpha + y * cfg.beta) / w_r;
            let (l, g) = loss_and_grad(&spec, p, &retain.matrix(batch), &Targets::Soft(t), loss)?;
            value += w_r * l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w_r * b);
        }
        if uses_forget {
            let fb = forget_batches.next_batch();
            let q = rows(&teacher_f, &fb);
            let (l, g) = loss_and_grad(&spec, p, &forget.matrix(&fb), &Targets::Soft(q), loss)?;
            value -= cfg.gamma * l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a -= cfg.gamma * b);
        }
        Ok((value, grad))
    })?;
    finish(req, spec, params, taken, taken * per_step, trace, None)
}

/// Descent on `beta * E_retain[loss] - (1 - beta) * E_forget[loss]`; each step
/// draws one retain and one forget minibatch.
pub fn neggrad_plus(req: &UnlearnRequest, cfg: NegGradConfig) -> Result<UnlearnOutcome> {
    let retain = req.view.retain_set();
    let forget = req.view.forget_set();
    let loss = loss_of(req);
    let spec = req.model.spec.clone();
    let steps = req.optim.total_steps(retain.len()).min(req.budget.budget_steps() / 2);
    let mut forget_batches = ForgetBatches::new(forget.len(), req.optim.batch_size, req.optim.seed);
    let mut params = req.model.params.clone();
    let active = 0..params.len();
    let b = cfg.beta;
    let (taken, trace) = run_steps(&mut params, req.optim, retain.len(), steps, active, |p, batch| {
        let (lr, gr) = loss_and_grad(&spec, p, &retain.matrix(batch), &retain.targets(batch), loss)?;
        let fb = forget_batches.next_batch();
        let (lf, gf) = loss_and_grad(&spec, p, &forget.matrix(&fb), &forget.targets(&fb), loss)?;
        let g = gr.iter().zip(&gf).map(|(r, f)| b * r - (1.0 - b) * f).collect();
        Ok((b * lr - (1.0 - b) * lf, g))
    })?;
    finish(req, spec, params, taken, 2 * taken, trace, None)
}

/// Mean squared per-sample gradient, accumulated in minibatch-sized passes.
/// Returns the diagonal and the number of passes.
pub fn fisher_diagonal(model: &ModelCheckpoint, data: &Dataset, batch: usize) -> Result<(Vec<f64>, usize)> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let loss = LossKind::for_spec(&model.spec);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut acc = vec![0.0; model.params.len()];
    let mut passes = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let s = squared_grad_sum(model, &data.matrix(chunk), &data.targets(chunk), loss)?;
        acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        passes += 1;
    }
    let n = data.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok((acc, passes))
}

/// Selective synaptic dampening: with `I_U` the forget-set Fisher diagonal and
/// `I_S` the full-training-set one, every parameter with `I_U > alpha I_S` is
/// multiplied by `min(lambda I_S / I_U, 1)`. The two Fisher passes are the only
/// budget charge.
pub fn ssd(req: &UnlearnRequest, cfg: SsdConfig) -> Result<UnlearnOutcome> {
    let bs = req.optim.batch_size;
    let cost = req.view.forget.len().div_ceil(bs) + req.view.data.len().div_ceil(bs);
    let budget = req.budget.budget_steps();
    if cost > budget {
        return Err(Error::BudgetExceeded { needed: cost, budget });
    }
    let (i_u, pu) = fisher_diagonal(req.model, &req.view.forget_set(), bs)?;
    let (i_s, ps) = fisher_diagonal(req.model, &req.view.data, bs)?;
    let (params, selected) = dampen(&req.model.params, &i_u, &i_s, cfg);
    finish(req, req.model.spec.clone(), params, 0, pu + ps, Vec::new(), Some(selected))
}

/// The SSD rule on precomputed Fisher diagonals. Unselected entries are copied
/// untouched.
pub fn dampen(params: &[f64], i_u: &[f64], i_s: &[f64], cfg: SsdConfig) -> (Vec<f64>, usize) {
    let threshold = match cfg.convention {
        AlphaConvention::AsWritten => cfg.alpha,
        AlphaConvention::Reciprocal => 1.0 / cfg.alpha,
    };
    let mut out = params.to_vec();
    let mut selected = 0;
    for i in 0..out.len() {
        if i_u[i] > threshold * i_s[i] {
            selected += 1;
            let beta = if i_u[i] > 0.0 {
                (cfg.lambda * i_s[i] / i_u[i]).min(1.0)
            } else {
                1.0
            };
            if beta < 1.0 {
                out[i] *= beta;
            }
        }
    }
    (out, selected)
}

fn finish(
    req: &UnlearnRequest,
    spec: crate::diffcore::ModelSpec,
    params: Vec<f64>,
    steps: usize,
    grad_evals: usize,
    loss_trace: Vec<f64>,
    selected: Option<usize>,
) -> Result<UnlearnOutcome> {
    Ok(UnlearnOutcome {
        model: ModelCheckpoint::new(spec, params)?,
        steps,
        grad_evals,
        budget_steps: req.budget.budget_steps(),
        loss_trace,
        selected,
    })
}

/// Parameter range left untouched by a last-`k` method.
pub fn frozen_prefix(model: &ModelCheckpoint, k: usize) -> Result<Range<usize>> {
    Ok(0..model.spec.trailing_range(k)?.start)
}
