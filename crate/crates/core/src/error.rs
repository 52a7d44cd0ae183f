use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error(
        "training diverged at epoch {epoch}, batch {batch}: last finite losses \
         total={last_total:e} ce={last_ce:e} con={last_con:e}"
    )]
    Divergence {
        epoch: usize,
        batch: usize,
        last_total: f64,
        last_ce: f64,
        last_con: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Binary-format failures, each pinned to a byte offset.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("truncated header at byte {offset}: need {expected} bytes, file has {actual}")]
    TruncatedHeader {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {actual}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("trailing bytes at byte {offset}: {extra} bytes past the declared payload")]
    TrailingBytes { offset: usize, extra: usize },

    #[error("dimension overflow at byte {offset}: {detail}")]
    DimensionOverflow { offset: usize, detail: String },

    #[error("malformed record at byte {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
}
