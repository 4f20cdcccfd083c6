use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at step {step} ({what})")]
    Divergence { step: usize, what: &'static str },

    #[error("unknown sample id {0}")]
    UnknownId(u64),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("attack failed: {0}")]
    AttackFailure(String),

    #[error("budget exceeded: needs {needed} gradient evaluations, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },

    #[error("solver did not converge: gradient norm {grad_norm:e} after {iterations} iterations")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
