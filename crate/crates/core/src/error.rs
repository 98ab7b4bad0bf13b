use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("descriptor length mismatch: {0} vs {1}")]
    DescriptorMismatch(usize, usize),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("registration failed: best consensus had {inliers} inliers, {required} required")]
    RegistrationFailed { inliers: usize, required: usize },

    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),

    #[error("pearson correlation undefined for a constant image")]
    ConstantImage,

    #[error("wrong marker set for {panel}: {detail}")]
    MarkerSet { panel: String, detail: String },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("objective undefined: no observed events")]
    NoEvents,

    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
