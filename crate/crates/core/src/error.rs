use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite values in {layer}{}", .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    NonFinite { layer: String, epoch: Option<usize> },

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("image error in {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Checkpoint failures. Each variant has a stable numeric code.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected \"HEBB\")")]
    BadMagic,
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated or malformed at byte {0}")]
    Truncated(usize),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("layer `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
}

impl CheckpointError {
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::BadMagic => 10,
            CheckpointError::Version { .. } => 11,
            CheckpointError::Truncated(_) => 12,
            CheckpointError::Crc { .. } => 13,
            CheckpointError::ShapeMismatch { .. } => 14,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
