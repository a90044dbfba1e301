use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "quadrature did not converge: best value {value} with error estimate {error_estimate} \
         after {nodes_used} nodes"
    )]
    QuadratureNonConvergence {
        value: f64,
        error_estimate: f64,
        nodes_used: usize,
    },

    #[error("inverse-kernel series diverged or stalled after {terms} terms (last term {last_term})")]
    SeriesDivergence { terms: usize, last_term: f64 },

    #[error("diagonal entry {index} is {value:e}; the discrete kernel is not invertible")]
    ZeroDiagonal { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("time {time} is not a node of the grid")]
    OffGrid { time: f64 },

    #[error("ordering violation: {0}")]
    Ordering(String),

    #[error("linear system is singular: {0}")]
    SingularSystem(String),

    #[error("residual {residual:e} exceeds the limit {limit:e}")]
    ResidualExceeded { residual: f64, limit: f64 },

    #[error("covariance matrix is not positive definite even after jitter (condition estimate {condition:e})")]
    NotPositiveDefinite { condition: f64 },

    #[error("value grid too narrow: mass defect {mass_defect:e}")]
    GridTooNarrow { mass_defect: f64 },

    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),

    #[error("missing decomposition: {0}")]
    MissingDecomposition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
