//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Bad model specification (zero width, dropout >= 1, ...).
    InvalidSpec(String),
    /// Shape or coverage mismatch between two artifacts that must agree.
    Mismatch(String),
    /// Argument outside its documented domain.
    InvalidArgument(String),
    /// A derivative or loss evaluated to NaN/Inf. Carries the parameter or
    /// sample description when known.
    NonFinite(String),
    /// Training loss became non-finite. Carries epoch and batch index.
    Diverged { epoch: usize, batch: usize },
    /// Regression system is singular and no ridge penalty was requested.
    SingularSystem(String),
    /// Serialized model stream is malformed.
    BadModelFile(String),
    /// Malformed CSV input. Carries the 1-based line number.
    BadCsv { line: usize, message: String },
    /// Configuration file problem (schema violation, unknown method, ...).
    Config(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidSpec(m) => write!(f, "invalid model spec: {m}"),
            Error::Mismatch(m) => write!(f, "mismatch: {m}"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}")
            }
            Error::SingularSystem(m) => write!(f, "singular system: {m}"),
            Error::BadModelFile(m) => write!(f, "bad model file: {m}"),
            Error::BadCsv { line, message } => write!(f, "csv error at line {line}: {message}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
