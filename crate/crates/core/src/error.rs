use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("capacity exceeded: requested {requested}, available {available}")]
    Capacity { requested: usize, available: usize },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("federation-incompatible parameters: {0}")]
    Compatibility(String),

    #[error("missing upload from agent {0}")]
    StalePeer(usize),

    #[error("round {epoch} stalled; absent agents: {absent:?}")]
    StalledRound { epoch: u64, absent: Vec<usize> },

    #[error("invalid weight file: {0}")]
    Format(String),

    #[error("weight data truncated in tensor `{0}`")]
    Truncated(String),

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FedError {
    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        FedError::Checkpoint {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
