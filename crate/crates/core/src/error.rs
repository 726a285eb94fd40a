use std::path::PathBuf;

use thiserror::Error;

use crate::voxel_map::InstanceId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0} (must be finite and positive)")]
    InvalidDepth(f64),

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("voxel has no observations")]
    UnobservedVoxel,

    #[error("unknown instance id {0}")]
    UnknownInstance(InstanceId),

    #[error("cannot merge instance {0} into itself")]
    IdenticalInstances(InstanceId),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("schema error in {file}: {field}: {message}")]
    Schema {
        file: PathBuf,
        field: String,
        message: String,
    },

    #[error("validation error in frame {frame_id}: {message}")]
    Validation { frame_id: u64, message: String },

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("ground truth is empty")]
    EmptyGroundTruth,

    #[error("resolution mismatch: map {map} m vs ground truth {gt} m")]
    ResolutionMismatch { map: f64, gt: f64 },

    #[error("scene generation failed: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn schema(
        file: impl Into<PathBuf>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Schema {
            file: file.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to I/O failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
