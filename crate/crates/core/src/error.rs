use thiserror::Error;

/// Errors produced by the twist library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A finite-difference or interpolation stencil produced a non-finite value.
    #[error("numerical failure at t={t}, x={x:?}: {what} (stencil values {stencil:?})")]
    NumericalFailure {
        what: String,
        t: f64,
        x: Vec<f64>,
        stencil: Vec<f64>,
    },

    #[error("value estimation failed at t={t}, x={x:?}: {reason}")]
    EstimationFailure { t: f64, x: Vec<f64>, reason: String },

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("degenerate twist: {0}")]
    DegenerateTwist(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("internal consistency check failed: {0}")]
    InternalConsistency(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error(
        "fixed point did not converge after {iterations} iterations (last step {last_step:e})"
    )]
    NotConverged {
        iterations: usize,
        last_step: f64,
        trace: Vec<crate::meanfield::TraceEntry>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
