//! Error type shared across the laboratory core.

use thiserror::Error;

/// Convenience alias used by every fallible core API.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong inside the core library.
///
/// Variants carry enough context to be actionable from a terminal: shape
/// errors name the graph operation involved, training failures report the
/// epoch, format errors state the offending byte-level detail.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// A graph was used out of order (e.g. backward before forward) or a
    /// node id from a different graph was passed in.
    #[error("graph usage error: {0}")]
    GraphUsage(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// A binary artifact (model file, dataset batch) is malformed.
    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    /// Underlying I/O failure, with the path for context.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Builds a [`Error::ShapeMismatch`] without `String` boilerplate at call sites.
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }

    /// Builds a [`Error::Format`] without `String` boilerplate at call sites.
    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
