//! Error types shared across the crate.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor dimension mismatch. `detail` names the offending axis.
    Shape { op: &'static str, detail: String },
    /// Invalid configuration (bad hyperparameter, malformed config file).
    Config(String),
    /// Invalid runtime state (e.g. eval before batch-norm stats exist).
    State(String),
    /// Input values outside their contract (non-binary target, probs outside [0,1]).
    Validation(String),
    /// Dataset / file-format problem that is not an OS-level I/O failure.
    Data(String),
    /// OS-level I/O failure with path context.
    Io { path: PathBuf, source: io::Error },
    /// Corrupt or incompatible checkpoint.
    Checkpoint(String),
    /// Non-finite values or a failed numeric check.
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Shape { .. }
            | Error::State(_)
            | Error::Validation(_)
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Checkpoint(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: dimension error: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
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

macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        $crate::error::Error::Shape { op: $op, detail: format!($($arg)*) }
    };
}
pub(crate) use shape_err;
