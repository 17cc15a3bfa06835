use thiserror::Error;

/// Errors raised by the library. The CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (smallest eigenvalue {0:.3e})")]
    NotPositiveDefinite(f64),

    #[error("symmetric eigensolver did not converge after {0} sweeps")]
    EigenNoConvergence(usize),

    #[error("unknown Gaussian moment kind `{0}` (expected 1..=6)")]
    UnknownMoment(String),

    #[error("query index {index} out of range for a prompt of length {len}")]
    QueryOutOfRange { index: usize, len: usize },

    #[error("spectrum is not simple: minimum relative gap {gap:.3e} at index {index}")]
    NonSimpleSpectrum { gap: f64, index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step size too large: {0}")]
    StepSizeTooLarge(String),

    #[error("non-finite iterate at iteration {iter}")]
    NonFinite { iter: usize },

    #[error("rate fit rejected: {0}")]
    RateFit(String),

    #[error("basis is not orthonormal (max Gram deviation {0:.3e})")]
    NotOrthonormal(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
