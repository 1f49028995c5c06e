use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PulError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PulError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty training set: no sample is selected for fine-tuning")]
    EmptyTrainingSet,

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("{}: locked by another writer", path.display())]
    Locked { path: PathBuf },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PulError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PulError::InvalidInput(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        PulError::Parse {
            offset,
            message: msg.into(),
        }
    }
}
