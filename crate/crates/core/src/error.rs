use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("text of width {needed}px does not fit a canvas of width {available}px")]
    Overflow { needed: usize, available: usize },

    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocab(char),

    #[error("label of length {len} does not fit {capacity} positions")]
    LabelLength { len: usize, capacity: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("CTC target of length {target_len} needs {required} frames, only {frames} available")]
    CtcInfeasible {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("frozen parameter {0} changed during training")]
    FrozenDrift(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
