//! Experiment harness: configuration, the attack/train/unlearn/evaluate
//! protocol, sweeps, manifests and plots.

pub mod config;
pub mod manifest;
pub mod plot;
pub mod protocol;
pub mod sweep;

use std::fmt;

pub use config::RunConfig;
pub use manifest::{MetricsRow, RunManifest};
pub use protocol::run_protocol;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "POISONBENCH_OUT";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    Config(String),
    /// A protocol step failed; exit code 3.
    Step { step: String, message: String },
}

impl CliError {
    pub fn step(step: impl Into<String>, err: impl fmt::Display) -> Self {
        CliError::Step {
            step: step.into(),
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Step { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Step { step, message } => write!(f, "step {step} failed: {message}"),
        }
    }
}

impl std::error::Error for CliError {}
