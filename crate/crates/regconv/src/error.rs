//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel out of range")]
    ChannelOutOfRange,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate RRoI")]
    DegenerateRroi,
    #[error("wrong alignment tag: expected {expected}, found {found}")]
    WrongTag {
        expected: &'static str,
        found: &'static str,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("truncated file")]
    Truncated,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss is not a scalar")]
    NonScalarLoss,
    #[error("NaN encountered in backward at node {node} ({op})")]
    NanInBackward { node: usize, op: &'static str },
    #[error("object not interior")]
    ObjectNotInterior,
    #[error("cannot place object without overlap after {0} attempts")]
    Overcrowded(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
