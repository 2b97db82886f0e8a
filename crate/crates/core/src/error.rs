use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("key not found: `{0}`")]
    NotFound(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },

    #[error("dataset validation failed with {0} error(s)")]
    Validation(usize),

    #[error("{0} gradient check(s) failed")]
    GradientCheck(usize),

    #[error("non-finite loss at frame {frame}")]
    NonFiniteLoss { frame: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
