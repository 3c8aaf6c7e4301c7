use std::path::PathBuf;

use thiserror::Error;

use crate::lineage::LineageRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input whose shape or contents violate an operation's precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: non-finite loss or weights")]
    TrainingDiverged { epoch: usize },

    #[error("synthesis failed after {attempts} attempts (last seed {last_seed}): {reason}")]
    SynthesisFailure {
        attempts: usize,
        last_seed: u64,
        reason: String,
    },

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("corrupt checkpoint at {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("ingestion failed for {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("run aborted after {} completed generation(s): {source}", record.rows.len())]
    Aborted {
        record: Box<LineageRecord>,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptCheckpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
