//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required file: {0}")]
    MissingRequiredFile(String),

    #[error("schema error in {file} at line {line} ({column}): {message}")]
    Schema {
        file: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("student {0} is mapped to both treatment and control arm codes")]
    ConflictingAssignment(String),

    #[error("{0}")]
    Domain(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Process exit code for the CLI: 2 for data/validation problems,
    /// 3 for estimation problems, 4 for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingRequiredFile(_)
            | Error::Schema { .. }
            | Error::ConflictingAssignment(_)
            | Error::Csv(_) => 2,
            Error::Domain(_) => 3,
            Error::Io(_) | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
