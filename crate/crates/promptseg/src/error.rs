use std::path::PathBuf;

/// Crate-wide error type. Every fallible public operation returns
/// `Result<T, Error>`; panics are reserved for internal logic bugs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape disagreement (matmul inner dims, elementwise shapes, ...).
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value that must be finite came out NaN or infinite.
    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    /// Bad configuration: unknown key, unparsable value, out-of-range setting.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset on disk.
    #[error("data error: {0}")]
    Data(String),

    /// Schema violation: empty condition set, unknown task/condition pairing,
    /// prompt outside image bounds, and the like.
    #[error("schema error: {0}")]
    Schema(String),

    /// Checkpoint file missing entries or shaped differently than the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
