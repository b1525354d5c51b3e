use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate pair ({state}, {object})")]
    DuplicatePair { state: String, object: String },

    #[error("unknown component: {0}")]
    UnknownComponent(String),

    #[error("pair ({state}, {object}) is listed as both seen and unseen")]
    SplitOverlap { state: String, object: String },

    #[error("split violation: {0}")]
    SplitViolation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing embedding: {0}")]
    MissingEmbedding(String),

    #[error("evaluation protocol: {0}")]
    Protocol(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("incompatible checkpoint: {0}")]
    Compat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration and format problems, 1 for
    /// everything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Format { .. }
            | Error::Compat(_)
            | Error::DuplicatePair { .. }
            | Error::SplitOverlap { .. }
            | Error::SplitViolation(_)
            | Error::UnknownComponent(_)
            | Error::MissingEmbedding(_) => 2,
            _ => 1,
        }
    }
}
