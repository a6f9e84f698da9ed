//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("volume format error: {0}")]
    VolumeFormat(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("vessel reconstruction error: {0}")]
    Vessel(String),

    #[error("vascular tree error: {0}")]
    Tree(String),

    #[error("1d flow solver error: {0}")]
    Flow(String),

    #[error("darcy solver error: {0}")]
    Darcy(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
