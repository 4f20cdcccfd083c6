use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegressor,
    LogisticClassifier,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    pub(crate) fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub(crate) fn second_deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

/// Architecture descriptor. Logistic and MLP models end in a softmax head;
/// the linear regressor has an identity head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegressor,
            input_dim,
            output_dim: 1,
            hidden_widths: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LogisticClassifier,
            input_dim,
            output_dim: classes,
            hidden_widths: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, activation: Activation) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            output_dim: classes,
            hidden_widths: hidden.to_vec(),
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("input_dim and output_dim must be at least 1"));
        }
        match self.kind {
            ModelKind::LinearRegressor | ModelKind::LogisticClassifier => {
                if !self.hidden_widths.is_empty() {
                    return Err(Error::invalid("linear and logistic models take no hidden layers"));
                }
            }
            ModelKind::Mlp => {
                if self.hidden_widths.contains(&0) {
                    return Err(Error::invalid("hidden widths must be positive"));
                }
            }
        }
        if self.kind == ModelKind::LogisticClassifier && self.output_dim < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        Ok(())
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::LinearRegressor
    }

    pub fn layer_count(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// (fan_in, fan_out) per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Each layer occupies a weight block (fan_out x fan_in, row-major) followed by its bias.
    pub fn layer_offsets(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                let r = start..start + i * o + o;
                start = r.end;
                r
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Parameter index range covering the trailing `k` layers.
    pub fn trailing_range(&self, k: usize) -> Result<Range<usize>> {
        let offsets = self.layer_offsets();
        if k == 0 || k > offsets.len() {
            return Err(Error::invalid(format!(
                "layer selector k={k} outside 1..={}",
                offsets.len()
            )));
        }
        Ok(offsets[offsets.len() - k].start..self.param_count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub layer_offsets: Vec<Range<usize>>,
}

impl ModelCheckpoint {
    pub fn new(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: params.len(),
            });
        }
        let layer_offsets = spec.layer_offsets();
        Ok(ModelCheckpoint {
            spec,
            params,
            layer_offsets,
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let n = spec.param_count();
        Self::new(spec, vec![0.0; n])
    }

    /// Seeded init: every weight and bias uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = vec![0.0; spec.param_count()];
        let mut rng = rng::stream(seed, Stream::Init);
        init_layers(&spec, &mut params, 0, &mut rng);
        Self::new(spec, params)
    }

    /// Re-draw the trailing `k` layers with the same scheme as [`ModelCheckpoint::init`].
    pub fn reinit_trailing(&mut self, k: usize, seed: u64) -> Result<()> {
        let range = self.spec.trailing_range(k)?;
        let first = self.spec.layer_count() - k;
        let mut rng = rng::stream(seed, Stream::Init);
        init_layers(&self.spec, &mut self.params, first, &mut rng);
        debug_assert_eq!(range.end, self.params.len());
        Ok(())
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.params[self.layer_offsets[l].clone()]
    }

    pub fn distance_l2(&self, other: &ModelCheckpoint) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn init_layers(spec: &ModelSpec, params: &mut [f64], first: usize, rng: &mut rng::Rng) {
    let offsets = spec.layer_offsets();
    for (l, (&(fan_in, _), range)) in spec.layer_shapes().iter().zip(&offsets).enumerate() {
        if l < first {
            continue;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        for p in &mut params[range.clone()] {
            *p = rng.random_range(-bound..=bound);
        }
    }
}
