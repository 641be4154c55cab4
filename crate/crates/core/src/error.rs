use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("label {label} is outside the {space} label space")]
    Label { label: usize, space: &'static str },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("synthetic folders match no class: {}", .0.join(", "))]
    UnmatchedClasses(Vec<String>),

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("checkpoint incompatible with bound encoder: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step} (real batch {real:?}, synthetic batch {synthetic:?})")]
    NonFiniteLoss {
        step: usize,
        real: Vec<usize>,
        synthetic: Vec<usize>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
