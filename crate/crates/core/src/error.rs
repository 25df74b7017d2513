use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empirical kernel undefined at step {step}, state {state}, action {action}")]
    OffSupport {
        step: usize,
        state: usize,
        action: usize,
    },

    #[error("matrix estimation failed{}: {reason} (best residual {best_residual:.3e})", step.map(|t| format!(" at step {t}")).unwrap_or_default())]
    SolverFailure {
        step: Option<usize>,
        reason: String,
        best_residual: f64,
    },

    #[error("all {0} candidate evaluations failed")]
    AllCandidatesFailed(usize),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
