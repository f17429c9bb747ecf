use std::io;

use thiserror::Error;

pub type Result<T, E = DealError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DealError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<DealError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DealError {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        DealError::Parse {
            line,
            msg: msg.into(),
        }
    }
}
