use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl OptimConfig {
    /// SGD with momentum 0.9 and weight decay 5e-4.
    pub fn sgd_momentum(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        OptimConfig {
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

/// Optimizer state. Updates only touch the `active` parameter range, so frozen
/// prefixes stay bit-identical.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    buf: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: &OptimConfig, n_params: usize) -> Self {
        let second = if cfg.optimizer == OptimizerKind::Adam {
            vec![0.0; n_params]
        } else {
            Vec::new()
        };
        Optimizer {
            cfg: cfg.clone(),
            buf: vec![0.0; n_params],
            second,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], active: Range<usize>) {
        self.t += 1;
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        match self.cfg.optimizer {
            OptimizerKind::Sgd => {
                for i in active {
                    params[i] -= lr * (grad[i] + wd * params[i]);
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = self.cfg.momentum;
                let first = self.t == 1;
                for i in active {
                    let g = grad[i] + wd * params[i];
                    self.buf[i] = if first { g } else { mu * self.buf[i] + g };
                    params[i] -= lr * self.buf[i];
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for i in active {
                    let g = grad[i] + wd * params[i];
                    self.buf[i] = b1 * self.buf[i] + (1.0 - b1) * g;
                    self.second[i] = b2 * self.second[i] + (1.0 - b2) * g * g;
                    let mhat = self.buf[i] / c1;
                    let vhat = self.second[i] / c2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
