use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncation(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("unknown autoencoder profile `{0}`")]
    Profile(String),

    #[error("class {0} has no easy exemplar")]
    ClassWithoutEasyExemplar(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty utilization trace")]
    EmptyTrace,

    #[error("numerical error at epoch {epoch}, batch {batch}: {what}")]
    Numerical { epoch: usize, batch: usize, what: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("platform error: {0}")]
    Platform(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Process exit-code classes used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numerical { .. } | Error::NonFinite(_) => ErrorClass::Numerical,
            Error::Format(_)
            | Error::Truncation(_)
            | Error::Range(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::ClassWithoutEasyExemplar(_)
            | Error::EmptyInput(_)
            | Error::EmptyTrace => ErrorClass::Data,
            _ => ErrorClass::Config,
        }
    }
}
