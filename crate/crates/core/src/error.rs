use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NmnError>;

#[derive(Debug, Error)]
pub enum NmnError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("entity {0} not found")]
    Lookup(u32),

    #[error("empty neighborhood")]
    EmptyNeighborhood,

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss in {phase} phase, epoch {epoch}, batch {batch}")]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl NmnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NmnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        NmnError::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
