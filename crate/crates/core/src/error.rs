use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VlaadError>;

#[derive(Debug, Error)]
pub enum VlaadError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of order tick {tick} (last accepted {last})")]
    OutOfOrderTick { tick: u64, last: u64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite loss")]
    Diverged { epoch: usize, batch: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("summarizer: {0}")]
    Summarizer(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VlaadError {
    /// True for errors caused by bad inputs or configuration rather than
    /// by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            VlaadError::DimensionMismatch { .. }
                | VlaadError::Empty(_)
                | VlaadError::InvalidArgument(_)
                | VlaadError::Format(_)
                | VlaadError::Json(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VlaadError::InvalidArgument(msg.into())
    }
}
