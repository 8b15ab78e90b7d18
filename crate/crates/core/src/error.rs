use thiserror::Error;

/// Errors raised by the moment, linearization and attack routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("argument outside the domain of {function}: {detail}")]
    Domain {
        function: &'static str,
        detail: String,
    },

    #[error("{function} overflowed: {detail}")]
    Overflow {
        function: &'static str,
        detail: String,
    },

    #[error("{routine} did not converge after {iterations} iterations")]
    NonConvergence {
        routine: &'static str,
        iterations: usize,
    },

    #[error("quadrature did not reach tolerance {tolerance:e}: estimate {estimate} (error bound {error:e})")]
    QuadratureTolerance {
        estimate: f64,
        error: f64,
        tolerance: f64,
    },

    #[error("covariance is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} below {threshold:e}")]
    NotPositiveSemidefinite { min_eigenvalue: f64, threshold: f64 },

    #[error("covariance is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn domain(function: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            function,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerical machinery itself (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Overflow { .. } | Error::NonConvergence { .. } | Error::QuadratureTolerance { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
