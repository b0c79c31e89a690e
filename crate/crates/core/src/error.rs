use std::path::PathBuf;

use thiserror::Error;

use crate::graph::DataError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("the labeled set is empty")]
    EmptyLabeledSet,
    #[error("the unlabeled pool is empty")]
    EmptyPool,
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node {node} is not in the unlabeled pool")]
    NotInPool { node: usize },
    #[error("score maps do not share a key set")]
    KeyMismatch,
    #[error("{0}")]
    Model(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Results { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
