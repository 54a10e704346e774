use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Every multi-start of the mixture likelihood maximization failed to
    /// converge. `best` is `(beta, theta, A, alpha)` at the best point seen.
    #[error("optimization failed to converge from {starts} starts (best log-likelihood {best_loglik})")]
    OptimizationFailure {
        starts: usize,
        best: [f64; 4],
        best_loglik: f64,
    },

    #[error("chain {stream_id} diverged at iteration {iteration}: {what}")]
    ChainDiverged {
        stream_id: u64,
        iteration: usize,
        what: String,
    },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
