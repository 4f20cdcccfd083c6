use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    /// Keyed by metric name; `null` where the metric does not apply.
    pub metrics: BTreeMap<String, Option<f64>>,
}

impl MetricsRow {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub run_dir: PathBuf,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub training_steps: usize,
    /// Attack diagnostics such as clean and corrupted accuracy.
    pub attack_summary: BTreeMap<String, f64>,
    /// No-unlearning row, retrain baseline, then one row per requested method.
    pub rows: Vec<MetricsRow>,
    /// Seconds since the epoch.
    pub started: u64,
    pub finished: u64,
    /// Wall time per row and per step, kept apart from the metrics so that
    /// reruns compare equal on everything else.
    pub wall_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn row(&self, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn artifact(&self, name: &str) -> Option<&Path> {
        self.artifacts.get(name).map(PathBuf::as_path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad manifest {}: {e}", path.display())))
    }

    /// Write the manifest after checking that every artifact exists.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        for (name, p) in &self.artifacts {
            if !p.exists() {
                return Err(CliError::step("manifest", format!("artifact {name} missing at {}", p.display())));
            }
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::step("manifest", e))?;
        fs::write(path, text).map_err(|e| CliError::step("manifest", e))
    }

    /// Plain-text table for `inspect`.
    pub fn render(&self) -> String {
        let mut out = format!(
            "config {}\ntool {}\nrun dir {}\ntraining steps {}\n",
            self.config_hash,
            self.tool_version,
            self.run_dir.display(),
            self.training_steps
        );
        for (k, v) in &self.attack_summary {
            out.push_str(&format!("attack {k} = {v}\n"));
        }
        let names: Vec<&String> = self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        out.push_str(&format!("{:<16}", "method"));
        for n in &names {
            out.push_str(&format!(" {n:>14}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<16}", r.method));
            for n in &names {
                match r.metrics.get(*n).copied().flatten() {
                    Some(v) if v.fract() == 0.0 && v.abs() < 1e15 => out.push_str(&format!(" {v:>14}")),
                    Some(v) => out.push_str(&format!(" {v:>14.5}")),
                    None => out.push_str(&format!(" {:>14}", "-")),
                }
            }
            out.push('\n');
        }
        for (k, v) in &self.artifacts {
            out.push_str(&format!("artifact {k}: {}\n", v.display()));
        }
        out
    }
}
