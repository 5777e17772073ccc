use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed line in a KITTI label file. `line` is 1-based.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Calibration key absent or carrying the wrong number of values.
    #[error("calibration key {key}: {msg}")]
    Calib { key: String, msg: String },

    #[error("invalid crop: crop_top {crop_top} must be smaller than image height {height}")]
    InvalidCrop { crop_top: u32, height: u32 },

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("weight file: {0}")]
    Weights(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
