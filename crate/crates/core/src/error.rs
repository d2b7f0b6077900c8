use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ComboError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ComboError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    /// A token count that cannot be laid out on a square grid.
    #[error("layout error: {0}")]
    Layout(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("incomplete bundle: missing map for backbone {backbone} layer {layer}")]
    IncompleteBundle { backbone: String, layer: u32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl ComboError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ComboError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        ComboError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
