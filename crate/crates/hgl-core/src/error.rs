use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum HglError {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("right-hand side has nonzero mean {mean:e} on a torus at lambda = 0")]
    NonZeroMean { mean: f64 },

    #[error("conjugate gradient did not converge: {iterations} iterations, relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("malformed snapshot: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HglError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HglError::InvalidArgument(msg.into())
    }

    /// True for failures of the iterative solver.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, HglError::NotConverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, HglError>;
