//! Datasets, partitions, synthetic generators, the poison ledger and file formats.

mod dataset;
pub mod fileio;
pub mod ledger;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{Dataset, DatasetView, Labels, Split};
pub use fileio::{export_csv, ingest_csv, CsvSchema, LabelKind};
pub use ledger::{partition_forget, LedgerEntry, NoiseLedger};
pub use synth::{
    make_blobs, make_blobs_with, make_synth_regression, random_feature_map, BlobSpec, FeatureMap,
    SynthRegression, SynthRegressionSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Gaussian,
    GradientMatching,
    GradientCanceling,
    Backdoor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonSpec {
    pub budget_fraction: f64,
    pub eps_p: f64,
    pub attack_kind: AttackKind,
    pub seed: u64,
}

impl PoisonSpec {
    /// Number of poisons `round(b_p * n)`; errors when that is below one.
    pub fn poison_count(&self, n: usize) -> Result<usize> {
        if !(self.budget_fraction > 0.0 && self.budget_fraction < 1.0) {
            return Err(Error::invalid("budget fraction must lie in (0, 1)"));
        }
        if !(self.eps_p >= 0.0) {
            return Err(Error::invalid("eps_p must be nonnegative"));
        }
        let p = (self.budget_fraction * n as f64).round() as usize;
        if p < 1 {
            return Err(Error::invalid(format!(
                "budget {} on {n} samples gives no poisons",
                self.budget_fraction
            )));
        }
        Ok(p)
    }
}
