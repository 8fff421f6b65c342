use std::time::Duration;

use thiserror::Error;

use crate::comm::Tag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("partition too fine for kernel: {0}")]
    PartitionTooFine(String),

    #[error("rank {rank} out of range for a group of {size}")]
    RankOutOfRange { rank: usize, size: usize },

    #[error("rank {rank} expected {expected} from rank {peer}, received {got}")]
    TagMismatch { rank: usize, peer: usize, expected: Tag, got: Tag },

    #[error(
        "watchdog: rank {rank} waited {waited:?} for {tag} from rank {peer}; \
         probable collective mismatch [{pending}]"
    )]
    Watchdog { rank: usize, peer: usize, tag: Tag, waited: Duration, pending: String },

    #[error("rank {rank}: peer {peer} exited while {tag} was pending")]
    Disconnected { rank: usize, peer: usize, tag: Tag },

    #[error("group aborted after a failure on another rank")]
    Aborted,

    #[error("worker {rank} failed: {source}")]
    Worker { rank: usize, source: Box<Error> },

    #[error("worker {rank} panicked: {message}")]
    Panic { rank: usize, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// The innermost error, looking through per-worker wrappers.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Worker { source, .. } => source.root_cause(),
            other => other,
        }
    }
}
