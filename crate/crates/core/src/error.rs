use thiserror::Error;

/// Errors raised across the lab. The CLI maps these onto process exit codes.
#[derive(Debug, Error)]
pub enum CdaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("queue {0} is empty")]
    EmptyQueue(u8),

    #[error("accuracy undefined: {0}")]
    UndefinedAccuracy(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl CdaError {
    /// Exit code used by the command line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            CdaError::Io(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CdaError>;

pub(crate) fn invalid_arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(CdaError::InvalidArgument(msg.into()))
}

pub(crate) fn invalid_config<T>(msg: impl Into<String>) -> Result<T> {
    Err(CdaError::InvalidConfiguration(msg.into()))
}
