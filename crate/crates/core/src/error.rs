use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: input {index} has spatial size {got}, expected {expected}")]
    SpatialMismatch {
        op: &'static str,
        index: usize,
        expected: String,
        got: String,
    },

    #[error("maxpool2: spatial size {h}x{w} is odd; pad or crop the input to even height and width")]
    OddSpatial { h: usize, w: usize },

    #[error("backward: loss must have shape 1x1x1x1, got {0}")]
    NonScalarLoss(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image size {h}x{w} is not divisible by {multiple}")]
    Divisibility { h: usize, w: usize, multiple: usize },

    #[error("{0} out of range")]
    Index(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint does not match configuration: {0}")]
    ParamMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
