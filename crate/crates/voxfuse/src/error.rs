//! Crate-wide error type.

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto process exit
/// codes: argument/format/parse problems are user-input errors, IO failures
/// carry the offending path, and numeric failures name the pipeline stage
/// that produced a non-finite value.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed binary or structured data (bad magic, truncated payload, …).
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed data we deliberately do not handle (dtype, byte order, …).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Text input that does not parse (calib files, config, manifests).
    #[error("parse error: {0}")]
    Parse(String),

    /// Invalid argument or violated precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A numeric stage produced non-finite values.
    #[error("numeric failure in {stage}: {detail}")]
    Numeric { stage: &'static str, detail: String },

    /// IO failure, always annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn numeric(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
