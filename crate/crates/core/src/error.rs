use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing or non-numeric value at row {row}, column {column:?}")]
    MissingValue { row: usize, column: String },

    #[error("timestamps not strictly increasing at row {row}")]
    TimestampOrder { row: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("variable {name:?} has zero variance on the training range")]
    ZeroVariance { name: String },

    #[error("range of length {len} is too short for input length {input_len} plus horizon {horizon}")]
    RangeTooShort { len: usize, input_len: usize, horizon: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape { context: String, expected: (usize, usize), actual: (usize, usize) },

    #[error("{0} is not row-stochastic")]
    NotRowStochastic(String),

    #[error("scale index {index} out of range (valid 1..{limit})")]
    ScaleIndex { index: usize, limit: usize },

    #[error("training diverged: first non-finite tensor is {0}")]
    Divergence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category used by the command line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingValue { .. } | Error::TimestampOrder { .. } | Error::Format(_) => "data",
            Error::Config(_) | Error::RangeTooShort { .. } => "config",
            Error::ZeroVariance { .. } => "normalization",
            Error::Shape { .. } | Error::NotRowStochastic(_) | Error::ScaleIndex { .. } => "contract",
            Error::Divergence(_) => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
