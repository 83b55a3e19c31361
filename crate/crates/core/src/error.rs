use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("singular system: Cholesky failed at jitter {jitter:e} (condition estimate {condition:e})")]
    SingularSystem { jitter: f64, condition: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("history is empty")]
    EmptyHistory,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("deployment failed at step {step}: {source}")]
    Deployment {
        step: usize,
        /// Queries made before the failure.
        queries: Vec<Vec<f64>>,
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
