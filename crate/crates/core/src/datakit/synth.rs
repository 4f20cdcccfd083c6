use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Distance of every class center from the origin; noise is unit-variance.
    pub separation: f64,
    pub seed: u64,
}

/// Gaussian blobs: class centers at random directions scaled to `separation`,
/// samples are center + N(0, I). The test split has `per_class / 4` samples
/// per class (at least one).
pub fn make_blobs(classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<Split> {
    make_blobs_with(&BlobSpec {
        classes,
        dim,
        per_class,
        test_per_class: (per_class / 4).max(1),
        separation,
        seed,
    })
}

pub fn make_blobs_with(spec: &BlobSpec) -> Result<Split> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::invalid("blobs need at least two classes and two dimensions"));
    }
    if spec.per_class == 0 || !(spec.separation >= 0.0) {
        return Err(Error::invalid("per_class must be positive and separation nonnegative"));
    }
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let mut centers = vec![0.0; spec.classes * spec.dim];
    for c in centers.chunks_mut(spec.dim) {
        c.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v *= spec.separation / norm);
    }
    let draw = |count: usize, rng: &mut rng::Rng, id0: u64| {
        let n = count * spec.classes;
        let mut x = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.classes;
            labels.push(c);
            for j in 0..spec.dim {
                let e: f64 = StandardNormal.sample(rng);
                x.push(centers[c * spec.dim + j] + e);
            }
        }
        let ids = (id0..id0 + n as u64).collect();
        Dataset::new(
            spec.dim,
            x,
            Labels::Classes {
                labels,
                classes: spec.classes,
            },
            ids,
        )
    };
    let train = draw(spec.per_class, &mut rng, 0)?;
    let mut test_rng = rng::stream(spec.seed, Stream::TestData);
    let test = draw(spec.test_per_class, &mut test_rng, train.len() as u64)?;
    Ok(Split { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRegressionSpec {
    pub n: usize,
    pub d: usize,
    pub informative_dims: usize,
    pub signal_var: f64,
    pub tail_var: f64,
    pub label_noise_var: f64,
    pub seed: u64,
}

impl SynthRegressionSpec {
    /// N=10000, d=1000, 50 informative coordinates, tail variance 1e-4, label noise variance 1e-2.
    pub fn reference(seed: u64) -> Self {
        SynthRegressionSpec {
            n: 10_000,
            d: 1000,
            informative_dims: 50,
            signal_var: 1.0,
            tail_var: 1e-4,
            label_noise_var: 1e-2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n < 2 {
            return Err(Error::invalid("need d >= 1 and n >= 2"));
        }
        if self.informative_dims < 2 || self.informative_dims > self.d {
            return Err(Error::invalid("informative_dims must lie in 2..=d"));
        }
        if !(self.signal_var >= 0.0 && self.tail_var >= 0.0 && self.label_noise_var >= 0.0) {
            return Err(Error::invalid("variances must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthRegression {
    pub data: Dataset,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

/// Two-teacher regression: the first half of the samples is labeled by `w1`,
/// the second half by `w2`. Both directions are unit-norm, orthogonal, and
/// supported on the informative coordinates.
pub fn make_synth_regression(spec: &SynthRegressionSpec) -> Result<SynthRegression> {
    spec.validate()?;
    let k = spec.informative_dims;
    let mut rng = rng::stream(spec.seed, Stream::Data);

    let mut w1: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut w2: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut w1);
    let proj: f64 = w1.iter().zip(&w2).map(|(a, b)| a * b).sum();
    w2.iter_mut().zip(&w1).for_each(|(b, a)| *b -= proj * a);
    normalize(&mut w2);
    w1.resize(spec.d, 0.0);
    w2.resize(spec.d, 0.0);

    let (s_sig, s_tail, s_noise) = (spec.signal_var.sqrt(), spec.tail_var.sqrt(), spec.label_noise_var.sqrt());
    let mut x = Vec::with_capacity(spec.n * spec.d);
    let mut y = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let row_start = x.len();
        for j in 0..spec.d {
            let e: f64 = StandardNormal.sample(&mut rng);
            x.push(if j < k { s_sig * e } else { s_tail * e });
        }
        let w = if i < spec.n / 2 { &w1 } else { &w2 };
        let clean: f64 = x[row_start..].iter().zip(w).map(|(a, b)| a * b).sum();
        let noise: f64 = StandardNormal.sample(&mut rng);
        y.push(clean + s_noise * noise);
    }
    let data = Dataset::with_sequential_ids(spec.d, x, Labels::Values(y))?;
    Ok(SynthRegression { data, w1, w2 })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter_mut().for_each(|a| *a /= n);
}

/// Fixed feature map applied identically to every split.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Identity,
    /// `x -> relu(M x / sqrt(in_dim))` with Gaussian `M` of shape (out_dim x in_dim).
    RandomRelu { m: DMatrix<f64> },
}

impl FeatureMap {
    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        let mut rng = rng::stream(seed, Stream::FeatureMap);
        let scale = 1.0 / (in_dim as f64).sqrt();
        // Filled row by row so the draw order matches a row-major layout.
        let vals: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                scale * e
            })
            .collect();
        Ok(FeatureMap::RandomRelu {
            m: DMatrix::from_row_slice(out_dim, in_dim, &vals),
        })
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            FeatureMap::Identity => in_dim,
            FeatureMap::RandomRelu { m } => m.nrows(),
        }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        match self {
            FeatureMap::Identity => Ok(data.clone()),
            FeatureMap::RandomRelu { m } => {
                if m.ncols() != data.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: m.ncols(),
                        got: data.dim(),
                    });
                }
                let feats = (data.full_matrix() * m.transpose()).map(|v| v.max(0.0));
                let out_dim = m.nrows();
                let mut x = Vec::with_capacity(data.len() * out_dim);
                for i in 0..feats.nrows() {
                    x.extend(feats.row(i).iter());
                }
                Dataset::new(out_dim, x, data.labels().clone(), data.ids().to_vec())
            }
        }
    }
}

/// Map `data` through a fresh seeded random feature map of width `out_dim`.
/// Reuse a [`FeatureMap`] directly when several splits must share the map.
pub fn random_feature_map(data: &Dataset, out_dim: usize, seed: u64) -> Result<Dataset> {
    FeatureMap::random(data.dim(), out_dim, seed)?.apply(data)
}
