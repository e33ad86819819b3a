//! On-disk formats: sequence containers, keypoint tables and weight files.

mod keypoints;
mod sequence;
mod weights;

use std::path::Path;

pub use keypoints::{read_keypoints, sidecar_path, write_keypoints, KeypointMeta, Keypoints};
pub use sequence::{load_sequence, read_sequence, save_sequence, write_sequence, PixelType, SEQ_MAGIC, SEQ_VERSION};
pub use weights::{load_weights, load_weights_for, read_weights, save_weights, write_weights, WeightManifest, WEIGHTS_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] myotracker_core::Error),
}

impl FormatError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        FormatError::Malformed(msg.into())
    }
}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FormatError::Malformed("file is truncated".into())
        } else {
            FormatError::Io { path: "<stream>".into(), source: e }
        }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;
