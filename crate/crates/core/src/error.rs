use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("duplicate passage id {0:?}")]
    DuplicateId(String),
    #[error("passage {0:?} has an empty body")]
    EmptyBody(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown passage id {0:?}")]
    UnknownPassage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {token} is outside the vocabulary (size {size})")]
    OutOfVocab { token: u32, size: usize },
    #[error("sequence of length {len} exceeds the model maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("shape mismatch: expected {expected} values, got {found}")]
    Shape { expected: usize, found: usize },
    #[error("vocabulary hash mismatch: file has {found:016x}, vocabulary is {expected:016x}")]
    VocabMismatch { expected: u64, found: u64 },
    #[error("malformed {kind} file: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("no usable training queries: {0}")]
    NoUsableQueries(String),
    #[error("cannot access {}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attaches the offending path to I/O errors.
pub(crate) trait PathContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> PathContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl Error {
    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }
}
