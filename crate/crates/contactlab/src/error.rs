//! Crate-wide error type.
//!
//! Variants group by how the CLI reports them: configuration problems exit
//! with 1, data problems with 2, numeric failures with 3.

use ndcore::NdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("engine error: {0}")]
    Engine(#[from] NdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ContactError {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            ContactError::Config(_) => 1,
            ContactError::Data(_)
            | ContactError::Structure(_)
            | ContactError::Io(_)
            | ContactError::Json(_) => 2,
            ContactError::Numeric(_) | ContactError::Engine(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, ContactError>;
