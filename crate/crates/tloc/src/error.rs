use std::path::PathBuf;

use thiserror::Error;

use crate::mr::BaseStationId;

/// Errors surfaced by the localization pipeline.
#[derive(Debug, Error)]
pub enum TlocError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input data; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("station {id} appears twice in the registry")]
    DuplicateStation { id: BaseStationId },

    #[error("serving station {id} is not in the registry")]
    UnknownServingStation { id: BaseStationId },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("histogram binning mismatch: {0}")]
    BinningMismatch(String),

    /// Input degenerate for the requested operation (empty sets, zero
    /// variance where variance is required, and similar).
    #[error("{0}")]
    Degenerate(String),

    #[error("no fingerprint cell shares a station with the sample")]
    Unlocatable,
}

impl TlocError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TlocError::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: u64, msg: impl Into<String>) -> Self {
        TlocError::Parse { path: path.into(), line, msg: msg.into() }
    }
}
