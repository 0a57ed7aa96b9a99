use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on the arguments was violated.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate density: every log-value is -inf")]
    DegenerateDensity,

    #[error("absolute continuity violated at grid index {index}: q = {q}, r = 0")]
    AbsoluteContinuity { index: usize, q: f64 },

    #[error("grid does not cover the target mass: captured {captured}, required {required}")]
    GridCoverage { captured: f64, required: f64 },

    #[error("predictive optimum unavailable: {0}")]
    PredOptUnavailable(String),

    /// A NaN was produced while evaluating or differentiating a graph.
    #[error("non-finite value in `{op}` (node {node}); trace: {trace}")]
    NonFinite {
        op: &'static str,
        node: usize,
        trace: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
