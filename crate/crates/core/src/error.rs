use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("extent {extent} on axis {axis} is not a multiple of voxel size {voxel_size}")]
    NonDivisibleExtent {
        axis: usize,
        extent: f64,
        voxel_size: f64,
    },
    #[error("non-positive size: {0}")]
    NonPositiveSize(String),
    #[error("quaternion norm {0:e} is too small to normalize")]
    DegenerateQuaternion(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("payload has {actual} rows for {expected} gaussians")]
    PayloadShapeMismatch { expected: usize, actual: usize },
    #[error("grid specs differ: {0}")]
    SpecMismatch(String),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("non-finite loss component: {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("ray direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),
    #[error("object {object} leaves the grid at frame offset {offset}")]
    OutOfGrid { object: usize, offset: i32 },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            context,
            expected,
            actual,
        }
    }
}
