use serde::{Deserialize, Serialize};

use crate::datakit::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Inf,
    L2,
    Unbounded,
}

/// Admissible set for per-sample perturbations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBound {
    pub norm_kind: NormKind,
    #[serde(default)]
    pub radius: Option<f64>,
    /// For `inf` only: multiply the radius by each coordinate's standard
    /// deviation in the clean data, so a pixel-scale budget such as 16/255
    /// carries over to standardized features.
    #[serde(default)]
    pub scale_by_std: bool,
}

impl PerturbationBound {
    pub fn inf(radius: f64) -> Self {
        PerturbationBound {
            norm_kind: NormKind::Inf,
            radius: Some(radius),
            scale_by_std: false,
        }
    }

    pub fn l2(radius: f64) -> Self {
        PerturbationBound {
            norm_kind: NormKind::L2,
            radius: Some(radius),
            scale_by_std: false,
        }
    }

    pub fn unbounded() -> Self {
        PerturbationBound {
            norm_kind: NormKind::Unbounded,
            radius: None,
            scale_by_std: false,
        }
    }

    pub fn scaled_by_std(mut self) -> Self {
        self.scale_by_std = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.norm_kind, self.radius) {
            (NormKind::Unbounded, None) => {}
            (NormKind::Unbounded, Some(_)) => return Err(Error::invalid("an unbounded perturbation takes no radius")),
            (_, None) => return Err(Error::invalid("a bounded perturbation needs a radius")),
            (_, Some(r)) if !(r >= 0.0 && r.is_finite()) => {
                return Err(Error::invalid("perturbation radius must be finite and nonnegative"))
            }
            _ => {}
        }
        if self.scale_by_std && self.norm_kind != NormKind::Inf {
            return Err(Error::invalid("scale_by_std applies to the inf norm only"));
        }
        Ok(())
    }

    /// Resolve against the clean data (for per-coordinate scaling).
    pub fn projector(&self, data: &Dataset) -> Result<Projector> {
        self.validate()?;
        let r = self.radius.unwrap_or(f64::INFINITY);
        let radii = match self.norm_kind {
            NormKind::Inf if self.scale_by_std => data.coordinate_std().into_iter().map(|s| s * r).collect(),
            NormKind::Inf => vec![r; data.dim()],
            _ => Vec::new(),
        };
        Ok(Projector {
            kind: self.norm_kind,
            radius: r,
            radii,
        })
    }
}

/// A resolved [`PerturbationBound`].
#[derive(Debug, Clone)]
pub struct Projector {
    kind: NormKind,
    radius: f64,
    radii: Vec<f64>,
}

impl Projector {
    /// Euclidean projection of one perturbation onto the admissible set.
    pub fn project(&self, delta: &mut [f64]) {
        match self.kind {
            NormKind::Unbounded => {}
            NormKind::Inf => {
                for (d, r) in delta.iter_mut().zip(&self.radii) {
                    *d = d.clamp(-r, *r);
                }
            }
            NormKind::L2 => {
                let n = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > self.radius {
                    delta.iter_mut().for_each(|v| *v *= self.radius / n);
                }
            }
        }
    }

    pub fn contains(&self, delta: &[f64], tol: f64) -> bool {
        match self.kind {
            NormKind::Unbounded => true,
            NormKind::Inf => delta.iter().zip(&self.radii).all(|(d, r)| d.abs() <= r + tol),
            NormKind::L2 => delta.iter().map(|v| v * v).sum::<f64>().sqrt() <= self.radius + tol,
        }
    }

    pub(crate) fn kind(&self) -> NormKind {
        self.kind
    }

    pub(crate) fn radius(&self) -> f64 {
        self.radius
    }

    pub(crate) fn radii(&self) -> &[f64] {
        &self.radii
    }
}
