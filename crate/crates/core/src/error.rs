//! Error types shared across the crate.

use std::fmt;

/// Crate-wide error type. Variants map to the failure classes surfaced by the
/// public API: shape mismatches, contract misuse, bad configuration, inputs
/// that make a computation meaningless, vocabulary misses, parse failures,
/// I/O, and training divergence.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dim { op: &'static str, detail: String },
    /// An operation was invoked outside its contract.
    Contract { op: &'static str, detail: String },
    /// A configuration value is invalid.
    Config(String),
    /// Input that leaves the requested computation undefined.
    Degenerate { op: &'static str, detail: String },
    /// Unknown token or answer string.
    Vocab(String),
    /// A persisted file failed to parse.
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Training produced a non-finite value.
    Diverged { step: u64, tensor: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Contract { op, detail } => write!(f, "contract violation in {op}: {detail}"),
            Error::Config(detail) => write!(f, "configuration error: {detail}"),
            Error::Degenerate { op, detail } => write!(f, "degenerate input to {op}: {detail}"),
            Error::Vocab(word) => write!(f, "unknown vocabulary entry: {word:?}"),
            Error::Parse { path, line, detail } => {
                write!(f, "parse error in {path} at line {line}: {detail}")
            }
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Diverged { step, tensor } => {
                write!(f, "training diverged at step {step}: non-finite value in {tensor}")
            }
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
