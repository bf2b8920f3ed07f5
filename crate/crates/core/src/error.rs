use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("SVD did not converge after {sweeps} Jacobi sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error("integration diverged at step {step} (state norm {norm:e})")]
    IntegrationDivergence { step: usize, norm: f64 },

    #[error("trajectory left the finite range at step {step}")]
    TrajectoryDivergence { step: usize },

    #[error("Newton iteration {iteration} produced a non-finite update")]
    NewtonDivergence { iteration: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("non-finite loss at update {update}")]
    NonFiniteLoss { update: usize },

    #[error("worker pool: {0}")]
    Pool(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
