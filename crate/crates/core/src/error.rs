use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset layout error: missing {0}")]
    Layout(PathBuf),

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("image has no foreground pixel below the background threshold")]
    EmptyImage,

    #[error("image of {height}x{width} is smaller than the {min}x{min} patch size")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value outside the function domain: {0}")]
    Domain(String),

    #[error("network mode error: {0}")]
    Mode(String),

    #[error("non-finite {what} at iteration {iteration}")]
    NonFiniteLoss { what: &'static str, iteration: u64 },

    #[error("validation set is empty")]
    EmptyValSet,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no samples with label {0}")]
    MissingClass(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
