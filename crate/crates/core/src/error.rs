use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed tensor container. `field` names the header field that failed.
    #[error("{path}: bad {field} at byte offset {offset}: {detail}")]
    Format { path: PathBuf, field: &'static str, offset: u64, detail: String },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape drift in tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeDrift { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
