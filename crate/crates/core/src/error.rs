use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("non-binary mask")]
    NonBinaryMask,
    #[error("empty source mask")]
    EmptyMask,
    #[error("empty point set")]
    EmptyPoints,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("object lost under augmentation after {0} attempts")]
    ObjectLost(usize),
    #[error("queried instance left the target view after {0} attempts")]
    OutOfFrame(usize),
    #[error("non-finite loss at epoch {epoch} step {step}; batch dumped to {dump}")]
    NonFiniteLoss { epoch: usize, step: usize, dump: PathBuf },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("image codec error for {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
