use std::fmt;

/// Error type shared by every kernel, layer, and I/O routine in the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes disagree with what an operation requires.
    ShapeMismatch(String),
    /// A scalar argument is out of its valid range.
    InvalidArgument(String),
    /// An operation produced a NaN or Inf; the message names the producer.
    NonFinite(String),
    /// A file had a bad magic number, version, or was truncated.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(m) => write!(f, "shape mismatch: {m}"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::ShapeMismatch(format!($($arg)*))
    };
}

#[macro_export]
macro_rules! arg_err {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
