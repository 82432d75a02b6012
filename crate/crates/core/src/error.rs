use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is at or below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("text is empty after normalization")]
    EmptyText,

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value {value} while evaluating {context}")]
    NonFinite { context: String, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("missing fixture for class {class:?}, template {template}, sample {sample}")]
    MissingFixture {
        class: String,
        template: usize,
        sample: usize,
    },

    #[error("LLM returned an empty response for class {class:?}")]
    EmptyResponse { class: String },

    #[error("LLM request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },

    #[error("HTTP error: {0}")]
    Http(String),

    #[error("missing semantic reference for class {0:?}")]
    MissingReference(String),

    #[error("checkpoint version {found:?} does not match expected {expected:?}")]
    VersionMismatch { expected: String, found: String },

    #[error("{what} fingerprint mismatch: checkpoint has {expected}, got {actual}")]
    FingerprintMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
