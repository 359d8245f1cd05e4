use std::fmt;

use crate::numerics::Shape4;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward needs a scalar loss, got shape {0}")]
    NonScalarLoss(Shape4),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("empty step dataset: {0}")]
    EmptyDataset(String),
    #[error("label: {0}")]
    Label(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl fmt::Display) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.to_string(),
    }
}
