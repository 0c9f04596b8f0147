use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("Cholesky factorisation failed (jitter reached {jitter:e})")]
    Cholesky { jitter: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("eigendecomposition did not converge")]
    EigenDecomposition,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-PD predictive covariance for episode {episode}")]
    EpisodeCovariance { episode: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
