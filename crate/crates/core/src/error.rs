use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by loading, validating and analysing hidden-state dumps.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{file}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        file: String,
        expected: u64,
        actual: u64,
    },

    #[error("{file}: non-finite value at byte offset {offset}")]
    NonFinite { file: String, offset: u64 },

    #[error("manifest field `{field}`: {reason}")]
    Manifest { field: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("label {0} has no rows")]
    LabelAbsent(usize),

    #[error("measure undefined: {0}")]
    Degenerate(String),

    #[error("candidate budget exceeded: {needed} directions needed, cap is {cap}")]
    Budget { needed: u128, cap: u128 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn manifest(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// Validation failures map to 2, budget and degeneracy failures to 3,
    /// everything else (I/O) to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Budget { .. } | Error::Degenerate(_) => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
