use thiserror::Error;

/// Errors produced anywhere in the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("integer overflow computing log-signature dimension for d={dim}, N={depth}")]
    Overflow { dim: usize, depth: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("path needs ≥ 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("tensor is not group-like: degree-0 coefficient is {0}")]
    NotGroupLike(f64),

    #[error("tensor is not a Lie element: residual norm {residual:e} relative to {norm:e}")]
    NotLie { residual: f64, norm: f64 },

    #[error("simulation produced a non-finite state at fine step {step}")]
    NonFiniteState { step: usize },

    #[error("hidden state became non-finite in interval {interval}")]
    NonFiniteHidden { interval: usize },

    #[error("non-finite input to network")]
    NonFiniteInput,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("relative error undefined: reference values are all zero")]
    ZeroNormalizer,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
