use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: left has length {left}, right has length {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("{file}: bad magic in header: expected {expected}, found {found}")]
    BadMagic {
        file: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{file}: truncated file while reading {field}")]
    Truncated { file: PathBuf, field: &'static str },

    #[error("count mismatch: images header declares {images}, labels header declares {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("infinite privacy cost: noise multiplier is 0")]
    InfinitePrivacyCost,

    #[error("invalid Renyi order {0}: must be > 1")]
    InvalidOrder(f64),

    #[error("privacy budget {target} is unreachable (floor at 0 steps is {floor})")]
    UnreachableBudget { target: f64, floor: f64 },

    #[error("aggregation weights must be nonnegative and sum to 1 (sum = {sum})")]
    InvalidWeights { sum: f64 },

    #[error("need at least 2 clients for correction, got {0}")]
    TooFewClients(usize),

    #[error("{field} must be {requirement}")]
    Validation {
        field: &'static str,
        requirement: String,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: &'static str, requirement: impl Into<String>) -> Self {
        Error::Validation {
            field,
            requirement: requirement.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
