//! Error taxonomy shared by the library and the CLI.

use thiserror::Error;

/// Library-wide error type. `Input` covers malformed or inconsistent inputs
/// (shape mismatches, bad files, parameters out of range), `Numeric` covers
/// failures of the numerics themselves (non-convergence, degenerate spectra).
#[derive(Debug, Error)]
pub enum EowsError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EowsError {
    /// Process exit code for the CLI: 1 for input/io problems, 2 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            EowsError::Input(_) | EowsError::Io(_) => 1,
            EowsError::Numeric(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, EowsError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EowsError::Input(msg.into()))
}

pub(crate) fn numeric_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EowsError::Numeric(msg.into()))
}
