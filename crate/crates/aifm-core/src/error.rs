//! Crate-wide error type.
//!
//! Variants map onto the process exit codes used by the CLI:
//! validation failures exit 2, numerical failures exit 3, I/O and
//! container-format failures exit 4.

use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration or argument violates an invariant, detected before
    /// any computation starts.
    #[error("validation: {0}")]
    Validation(String),

    /// A point fell outside the domain bounding box.
    #[error("point {point:?} outside domain (bounds {min:?} .. {max:?})")]
    OutOfDomain {
        point: [f64; 3],
        min: [f64; 3],
        max: [f64; 3],
    },

    /// A solver produced a non-finite value.
    #[error("numeric failure at {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// A binary container or CSV file could not be decoded.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// CFD field ingestion failed (coverage, monotonicity, missing columns).
    #[error("ingestion: {0}")]
    Ingestion(String),

    #[error("i/o on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage failed; the run directory is left in place.
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::OutOfDomain { .. } | Error::Ingestion(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Format { .. } | Error::Io { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
