use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called before any forward pass was recorded")]
    NothingRecorded,

    #[error("point at horizon: homogeneous coordinate {w:e} is too close to zero")]
    PointAtHorizon { w: f64 },

    #[error("zero-length direction between transformed endpoints")]
    ZeroLengthDirection,

    #[error("horizontal line has no x-intercept")]
    HorizontalLine,

    #[error("homography is singular (determinant {0:e})")]
    SingularHomography(f64),

    #[error("bad weights file: {0}")]
    BadWeights(String),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Whether the failure came from reading or writing a file.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Image { source, .. } => matches!(source, image::ImageError::IoError(_)),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
