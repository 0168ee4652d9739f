//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A model or pipeline configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A stated precondition does not hold for the given input.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Input data could not be decoded or validated.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A layer kind the FLOPs model does not know how to bill.
    #[error("unsupported operation for FLOPs counting: {0}")]
    UnsupportedOp(String),

    /// Training aborted on a non-finite loss; carries the diagnostic dump.
    #[error("non-finite loss at epoch {epoch} step {step}; batch ids {batch_ids:?}\n{diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
        diagnostics: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
