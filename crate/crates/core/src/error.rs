use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config {path}:{line}: {msg}")]
    ConfigLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigLine { .. } => 2,
            Error::Load { .. } | Error::Storage { .. } => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}
