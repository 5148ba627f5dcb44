use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, too small to normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("temperature must be positive, got {0}")]
    NonpositiveTemperature(f64),

    #[error("non-finite gradient at parameter {0}")]
    NonfiniteGradient(usize),

    #[error("cannot split {samples} samples into {parts} parts")]
    TooFewSamples { samples: usize, parts: usize },

    #[error("no sample was correctly retrieved by the old snapshot")]
    EmptyCorrectSet,

    #[error("could not construct a valid instance: {0}")]
    ConstructionFailure(String),

    #[error("continual training requires a pretrained snapshot")]
    MissingPretrain,

    #[error("no phase records found under {}", .0.display())]
    MissingRecords(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
