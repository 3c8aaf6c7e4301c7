//! Command implementations behind the `evosynth` binary.

pub mod commands;
pub mod config;

use evosynth_core::Error;
use thiserror::Error as ThisError;

/// Exit status for a successful command.
pub const EXIT_OK: i32 = 0;
/// Bad arguments, configuration or input data.
pub const EXIT_INPUT: i32 = 2;
/// An evolution run stopped before its last generation.
pub const EXIT_ABORTED: i32 = 3;
/// A checkpoint failed validation.
pub const EXIT_CORRUPT: i32 = 4;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Aborted(String),
    #[error("{0}")]
    Corrupt(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Aborted(_) => EXIT_ABORTED,
            CliError::Corrupt(_) => EXIT_CORRUPT,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::CorruptCheckpoint { .. } => CliError::Corrupt(msg),
            Error::Aborted { .. } | Error::TrainingDiverged { .. } | Error::SynthesisFailure { .. } => {
                CliError::Aborted(msg)
            }
            _ => CliError::Input(msg),
        }
    }
}
