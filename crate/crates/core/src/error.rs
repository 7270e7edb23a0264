use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("operator is not Hermitian (deviation {deviation:.3e}, allowed {allowed:.3e})")]
    NotHermitian { deviation: f64, allowed: f64 },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested object is too large for the chosen representation.
    #[error("{what}: dimension {dim} exceeds limit {limit}")]
    SizeOverflow {
        what: &'static str,
        dim: usize,
        limit: usize,
    },

    /// An iterative or adaptive procedure failed to reach its tolerance.
    #[error("{what} did not converge (achieved {achieved:.3e}, required {required:.3e})")]
    NonConvergence {
        what: &'static str,
        achieved: f64,
        required: f64,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error reports a numerical tolerance failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NotHermitian { .. } | Error::InvalidState(_)
        )
    }

    pub fn is_overflow(&self) -> bool {
        matches!(self, Error::SizeOverflow { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
