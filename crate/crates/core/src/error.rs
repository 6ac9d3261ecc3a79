use thiserror::Error;

use nppr_tensor::TensorError;

use crate::models::DependencyMode;

#[derive(Debug, Error)]
pub enum NpprError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{mode} head requires {what}")]
    MissingConditioning {
        mode: DependencyMode,
        what: &'static str,
    },

    #[error("invalid config at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("margin loss needs at least two classes, got {0}")]
    TooFewClasses(usize),

    #[error("entropy ratio is undefined for K = {0}")]
    DegenerateMixture(usize),

    #[error("grid of {points} points exceeds cap {cap}")]
    GridCapExceeded { points: u128, cap: u128 },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("mismatched experiment keys: {0}")]
    MismatchedExperiments(String),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, NpprError>;

pub(crate) fn invalid(msg: impl Into<String>) -> NpprError {
    NpprError::Invalid(msg.into())
}
