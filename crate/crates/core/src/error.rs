use std::fmt;

/// Errors raised anywhere in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape.
    Shape(String),
    /// An argument is outside the operation's domain.
    Invalid(String),
    /// A NaN or infinity appeared where a finite value is required.
    NonFinite(String),
    /// An operation name that is not in the relevant operation pool.
    UnknownOperation(String),
    /// A training stage aborted.
    Stage { stage: String, reason: String },
    /// File or format failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::UnknownOperation(name) => write!(f, "unknown operation {name:?}"),
            Error::Stage { stage, reason } => write!(f, "stage {stage} failed: {reason}"),
            Error::Io(msg) => write!(f, "i/o: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::$variant(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
