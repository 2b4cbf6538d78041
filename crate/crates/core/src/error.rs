use std::path::PathBuf;

use numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("invalid sensor: {0}")]
    Sensor(String),
    #[error("band selection {start}+{length} out of range for {band_count} bands")]
    Selection {
        start: usize,
        length: usize,
        band_count: usize,
    },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no normalization statistics for sensor '{0}'")]
    MissingStats(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint does not match configuration: {0}")]
    CheckpointMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
