use std::fmt;

use eosflip::attack::AttackError;
use eosflip::eval::EvalError;
use eosflip::fixture::FixtureError;
use eosflip::io::IoError;
use eosflip::model::ModelError;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or invalid request (exit 2, like clap usage errors).
    Validation(String),
    /// Fixture calibration could not place the baseline length (exit 3).
    Calibration(String),
    /// Unreadable, corrupt, or mismatched data files (exit 4).
    Data(String),
    /// Everything else (exit 1).
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Calibration(_) => 3,
            CliError::Data(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Calibration(m) => write!(f, "calibration failed: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::InvalidSplit { .. } | IoError::TokenOutOfVocab { .. } => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::CalibrationFailed { .. } => CliError::Calibration(e.to_string()),
            FixtureError::InvalidRange(_) | FixtureError::Model(ModelError::InvalidConfig(_)) => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::InvalidConfig(_) | AttackError::NoSearchPrompts => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::MismatchedModels(_) | EvalError::EmptyPrompts => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
