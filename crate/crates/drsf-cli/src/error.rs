//! CLI error type with process exit-code mapping.

use drsf_core::CoreError;

/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(m) => CliError::Numeric(m),
            CoreError::CorruptData(m) => CliError::Data(m),
            CoreError::DomainOverlap(m)
            | CoreError::InvalidArgument(m)
            | CoreError::ShapeMismatch(m) => CliError::Config(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
