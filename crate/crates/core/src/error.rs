use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the imputation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("patients present in triplets but missing from demographics: {}", .0.join(", "))]
    MissingDemographics(Vec<String>),

    #[error("empty dataset after filtering")]
    EmptyAfterFiltering,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("edge ({patient}, {event}) is not present in the graph")]
    EdgeNotFound { patient: usize, event: usize },

    #[error("patient {patient} needs {demand} negatives but only {available} non-edges exist")]
    InfeasibleNegatives {
        patient: usize,
        demand: usize,
        available: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown cutoff policy `{0}` (expected `0.5`, a number in (0,1), or `train-frequency`)")]
    UnknownPolicy(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
