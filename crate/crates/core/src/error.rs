//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inconsistent state: {0}")]
    InconsistentState(String),

    #[error("insufficient views: got {got}, need at least 2")]
    InsufficientViews { got: usize },

    #[error("empty object: no voxel exceeds the density threshold")]
    EmptyObject,

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    #[error("parse error in field `{field}` at byte offset {offset}: {message}")]
    Parse {
        field: String,
        offset: u64,
        message: String,
    },

    #[error("unsupported format version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn inconsistent(msg: impl Into<String>) -> Self {
        Error::InconsistentState(msg.into())
    }
}
