use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metaimage header: {0}")]
    Header(String),

    #[error("raw payload size mismatch: expected {expected} bytes, found {found}")]
    RawSize { expected: usize, found: usize },

    #[error("unsupported element type {0}")]
    UnsupportedElementType(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("bounding box out of bounds: {0}")]
    OutOfBounds(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training: {0}")]
    Training(String),

    #[error("segmentation: {0}")]
    Segmentation(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("phantom: {0}")]
    Phantom(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Short stable tag for the variant, used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Header(_) => "header",
            Error::RawSize { .. } => "raw-size",
            Error::UnsupportedElementType(_) => "element-type",
            Error::InvalidVolume(_) => "invalid-volume",
            Error::DimMismatch(_) => "dim-mismatch",
            Error::OutOfBounds(_) => "out-of-bounds",
            Error::EmptyMask(_) => "empty-mask",
            Error::Shape(_) => "shape",
            Error::Graph(_) => "graph",
            Error::Checkpoint(_) => "checkpoint",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::Training(_) => "training",
            Error::Segmentation(_) => "segmentation",
            Error::Metric(_) => "metric",
            Error::Degenerate(_) => "degenerate",
            Error::Phantom(_) => "phantom",
            Error::Config(_) => "config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
