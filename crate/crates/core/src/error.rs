use std::io;

use thiserror::Error;

use crate::lut_store::LutError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid config: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },

    #[error("layer {layer} out of range ({n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("operation requires the {expected} variant, model is {actual}")]
    WrongVariant {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("kv cache holds {cached} positions but the call starts at {position}")]
    CachePosition { cached: usize, position: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Lut(#[from] LutError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
