use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "lattice has {sites} sites, above the dense cap of {cap} sites \
         (a dense Green matrix needs 8*sites^2 = {bytes} bytes)"
    )]
    ResourceCap { sites: usize, cap: usize, bytes: u128 },

    #[error("matrix is not positive definite (pivot {pivot} at row {row}, after jitter {jitter})")]
    NotPositiveDefinite { row: usize, pivot: f64, jitter: f64 },

    #[error("covariance is not positive semidefinite (pivot {pivot} at row {row})")]
    NotPsd { row: usize, pivot: f64 },

    #[error("degenerate lattice: {0}")]
    DegenerateLattice(String),

    #[error("point configuration has no atoms; resample or deepen the truncation level")]
    EmptyConfiguration,

    #[error("enumeration needs {outcomes} outcomes, above the budget of {budget}; use Monte Carlo mode")]
    EnumerationBudget { outcomes: u128, budget: u128 },

    #[error("random walk exceeded the safety cap of {cap} steps")]
    WalkStepCap { cap: u64 },

    #[error("truncation tail bound {bound:.3e} at beta={beta} exceeds epsilon {epsilon:.3e}")]
    TruncationBound { beta: f64, bound: f64, epsilon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
