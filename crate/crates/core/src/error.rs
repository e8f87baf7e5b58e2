use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image dimensions {width}x{height}: {reason}")]
    InvalidDimensions {
        width: u32,
        height: u32,
        reason: &'static str,
    },

    #[error("pixel buffer length {actual} does not match {expected}")]
    BufferLength { expected: usize, actual: usize },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("template placement ({x}, {y}) of {tw}x{th} exceeds {sw}x{sh} search image")]
    OutOfBounds {
        x: u32,
        y: u32,
        tw: u32,
        th: u32,
        sw: u32,
        sh: u32,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown class directory {}", .0.display())]
    UnknownClass(PathBuf),

    #[error("unknown scenario directory {}", .0.display())]
    UnknownScenario(PathBuf),

    #[error("class {0} has no items; stratification impossible")]
    EmptyClass(crate::corpus::GazeClass),

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("model format: {0}")]
    ModelFormat(String),

    #[error("frame source exhausted after {got} of {wanted} frames")]
    SourceExhausted { got: usize, wanted: usize },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("classifier: {0}")]
    Classifier(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
