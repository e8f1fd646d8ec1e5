//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by data handling, training, attacks, and run plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent. The string
    /// names the offending field path.
    #[error("config error: {0}")]
    Config(String),

    /// Array shape does not match the expected contract.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// An input value violates its domain (e.g. pixel outside [0,1],
    /// probability vector not on the simplex, non-finite number).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A class id is outside [0, num_classes).
    #[error("class id {id} out of range for {num_classes} classes")]
    ClassOutOfRange { id: usize, num_classes: usize },

    /// An example index is not part of the referenced collection.
    #[error("index {0} out of range")]
    IndexOutOfRange(usize),

    /// Training produced a non-finite loss and was aborted.
    #[error("divergence in {stage} at epoch {epoch}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },

    /// A referenced run, checkpoint, or snapshot does not exist.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// An on-disk artifact failed integrity verification.
    #[error("artifact {path} failed verification: {detail}")]
    ArtifactCorrupt { path: PathBuf, detail: String },

    /// Unsupported or malformed file format.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
