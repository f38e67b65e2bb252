use thiserror::Error;

use crate::geom::SegmentLabel;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate segment {segment}: {reason}")]
    DegenerateSegment { segment: SegmentLabel, reason: String },

    /// An operation was called in the wrong order, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
