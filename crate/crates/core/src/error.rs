use std::path::PathBuf;

use crate::transforms::TensorFormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient samples: need >= {needed}, got {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("tensor format error in {path:?}: {source}")]
    TensorFile {
        path: PathBuf,
        #[source]
        source: TensorFormatError,
    },

    #[error(transparent)]
    TensorFormat(#[from] TensorFormatError),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path:?}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn domain(what: &'static str, value: f64) -> Self {
        Error::Domain { what, value }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
