use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyData(String),

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("row {row}: timestamp {timestamp} does not follow {previous}")]
    Ordering {
        row: usize,
        timestamp: String,
        previous: String,
    },

    #[error("row {row}: invalid bar: {message}")]
    InvalidBar { row: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid feature subset: {0}")]
    Subset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("undefined Sharpe ratio: {0}")]
    UndefinedSharpe(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::Subset(_) | Error::Contract(_) => {
                ErrorClass::Usage
            }
            Error::Singular(_) | Error::Diverged { .. } | Error::UndefinedSharpe(_) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
