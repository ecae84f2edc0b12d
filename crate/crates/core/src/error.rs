//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestep {t} out of range [0, {max}]")]
    TimestepOutOfRange { t: i64, max: usize },

    #[error("numerical domain: {0}")]
    NumericalDomain(String),

    #[error("unknown parameter name: {0}")]
    NameNotFound(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite checkpoint for stage '{stage}': run stage '{missing}' first (looked in {path})")]
    MissingPrerequisite {
        stage: String,
        missing: String,
        path: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("config hash mismatch: checkpoint has {checkpoint}, supplied config hashes to {config}")]
    ConfigHashMismatch { checkpoint: String, config: String },

    #[error("training diverged at step {step}: {diagnostic}")]
    Diverged { step: usize, diagnostic: String },

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
