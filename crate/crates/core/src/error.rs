use std::path::PathBuf;

/// Errors raised anywhere in the pruning pipeline.
///
/// Each variant maps onto one of the CLI exit-code classes through
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed npy file: {0}")]
    Format(String),

    #[error("unsupported npy content: {0}")]
    Unsupported(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("inconsistent batch: {0}")]
    Consistency(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("kernel value exp({log_value:.3}) out of range for token pair ({row}, {col})")]
    NumericRange { row: usize, col: usize, log_value: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for bad data.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
