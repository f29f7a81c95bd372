use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

/// Error kinds surfaced by the library.
///
/// The CLI maps each variant family onto a distinct process exit code, see
/// [`LabError::exit_code`].
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        LabError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        LabError::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        LabError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        LabError::Numeric(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Shape(_) | LabError::Capacity(_) => 2,
            LabError::Data(_) | LabError::Empty(_) | LabError::Json(_) => 3,
            LabError::Numeric(_) => 4,
            LabError::Io { .. } => 1,
        }
    }
}
