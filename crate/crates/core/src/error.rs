use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("sample pool exhausted for class {class}")]
    PoolExhausted { class: usize },

    #[error("gradient variance of client {client} is zero; apply the variance floor before building the mixing matrix")]
    ZeroVariance { client: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("need {needed} samples, dataset has {available}")]
    NotEnoughSamples { needed: usize, available: usize },

    #[error("missing cluster labels: {0}")]
    MissingClusters(String),

    #[error("all effective weights are zero")]
    ZeroWeight,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
