use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("support mismatch: {left} vs {right}")]
    SupportMismatch { left: usize, right: usize },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid supervision plan: {0}")]
    InvalidPlan(String),

    #[error("training diverged at step {step} (seed {seed}): {detail}")]
    Diverged { step: usize, seed: u64, detail: String },

    #[error("config error at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
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
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::InvalidConfig(_) | Error::InvalidPlan(_)
        )
    }
}
