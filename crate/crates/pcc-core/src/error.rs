use thiserror::Error;

/// Errors surfaced by the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between arrays.
    #[error("dimension mismatch: {context} (left {left:?}, right {right:?})")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Invalid configuration value (K >= N, non-divisible widths, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller-side contract was violated (empty cloud, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file content.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// Parse error in a text file, with a line number.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Dataset layout problem.
    #[error("data error: {0}")]
    Data(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dimension(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
