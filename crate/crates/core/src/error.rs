use std::io;

use mmsc_tensor::checkpoint::CheckpointError;
use mmsc_tensor::TensorError;
use thiserror::Error;

use crate::graph::{GraphError, ItemId};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("data format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("unknown item {0}")]
    Lookup(ItemId),
    #[error("items unknown to the model: {0:?}")]
    Coverage(Vec<ItemId>),
    #[error("requested {requested} noise edges but only {available} non-edges are available")]
    Capacity { requested: usize, available: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("judge failure: {0}")]
    Judge(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("empty report: {0}")]
    Empty(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for malformed input data (as opposed to bad configuration).
    pub fn is_data_format(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Graph(GraphError::Parse { .. }) | Error::Checkpoint(CheckpointError::Format(_))
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
