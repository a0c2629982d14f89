use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("non-finite loss at step {step}: {value}")]
    Divergence { step: usize, value: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
