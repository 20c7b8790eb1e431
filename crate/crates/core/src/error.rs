//! Crate-wide error type.

use std::fmt;

/// Errors produced by any stage of the engine.
#[derive(Debug)]
pub enum Error {
    /// Malformed input file (carries path and 1-based line number where known).
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Structurally well-formed input that violates a documented invariant.
    Validation(String),
    /// A size guard was hit (dense-inversion cap, subgraph sizing).
    Size(String),
    /// Tensor-op shape mismatch; names the op and the offending shapes.
    Shape { op: &'static str, detail: String },
    /// Bad configuration (unknown key, out-of-range value, missing field).
    Config(String),
    /// Filesystem failure wrapping the underlying io error.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Numerical failure (non-finite loss or gradient) with context.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { path, line, msg } => {
                write!(f, "parse error in {path} at line {line}: {msg}")
            }
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Size(msg) => write!(f, "size error: {msg}"),
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Numeric(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
