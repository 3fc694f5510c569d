use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cholesky factorization failed (last jitter tried: {jitter:e})")]
    Factorization { jitter: f64 },

    #[error("gram matrix is singular; duplicate inputs at indices {0:?}")]
    DuplicateInputs(Vec<usize>),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("network architectures differ")]
    ArchitectureMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("episode {episode}, step {step}: {source}")]
    Training {
        episode: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
