use thiserror::Error;

use crate::diffkit::DiffError;
use crate::rot3::GeometryError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("Θz underflow: projected embedding has norm {norm:e}")]
    ThetaUnderflow { norm: f64 },
    #[error("diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
    #[error("all {restarts} pose restarts failed")]
    AllRestartsFailed { restarts: usize },
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
