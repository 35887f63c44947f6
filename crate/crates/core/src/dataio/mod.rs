//! Scene datasets on disk, the synthetic deformable-scene generator,
//! checkpoint persistence and image metrics.

mod checkpoint;

mod image;
mod scene;
mod synthetic;

use std::path::PathBuf;

use thiserror::Error;


pub use checkpoint::{
    checkpoint_profile, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic, MAGIC,
    VERSION,
};
pub use image::{psnr, read_png, ssim, write_png, PSNR_CAP};
pub use scene::{load_scene, write_scene, CameraFrame, FrameEntry, Scene, SceneManifest, MANIFEST};
pub use synthetic::{generate_synthetic_scene, synthesize, SyntheticConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("frame {frame}: malformed pose: {reason}")]
    MalformedPose { frame: usize, reason: String },
    #[error("frame {frame}: malformed intrinsics: {reason}")]
    BadIntrinsics { frame: usize, reason: String },
    #[error("frame {frame}: condition vector has {got} values, expected {want}")]
    Condition { frame: usize, got: usize, want: usize },
    #[error("{path}: image is {got:?}, expected {want:?}")]
    ImageSize {
        path: PathBuf,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("{path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt table: {0}")]
    CorruptTable(String),
    #[error("checkpoint holds {found} values, expected {expected}")]
    ProfileMismatch { found: String, expected: String },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

impl DataError {
    /// Stable short identifier per failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            DataError::MissingFile(_) => "missing-file",
            DataError::Io { .. } => "io",
            DataError::Manifest { .. } => "manifest",
            DataError::MalformedPose { .. } => "malformed-pose",
            DataError::BadIntrinsics { .. } => "bad-intrinsics",
            DataError::Condition { .. } => "condition",
            DataError::ImageSize { .. } => "image-size",
            DataError::Png { .. } => "png",
            DataError::Parse { .. } => "parse",
            DataError::BadMagic => "bad-magic",
            DataError::VersionMismatch { .. } => "version-mismatch",
            DataError::CorruptTable(_) => "corrupt-table",
            DataError::ProfileMismatch { .. } => "profile-mismatch",
            DataError::ShapeMismatch(..) => "shape-mismatch",
        }
    }

    /// Wraps an IO error on `path`; a missing file gets its own variant.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path)
        } else {
            DataError::Io { path, source }
        }
    }
}
