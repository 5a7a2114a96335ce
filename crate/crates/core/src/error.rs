use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; build a new graph for the next pass")]
    GraphConsumed,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown ablation variant `{0}` (expected full, non_cam, non_ca, non_sa, non_sd)")]
    UnknownVariant(String),

    #[error("checkpoint does not match network:\n{0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported image {path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
