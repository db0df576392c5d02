use thiserror::Error;

use crate::weights::WeightFit;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column `{col}`")]
    NonNumericCell { row: usize, col: String },
    #[error("row {0}: treatment value is not one of the declared levels")]
    TreatmentNotInLevels(usize),
    #[error("file has no data rows")]
    EmptyFile,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid treatment space: {0}")]
    InvalidTreatmentSpace(String),
    #[error("fold count {l} must satisfy 2 <= L <= n (n = {n})")]
    BadFoldCount { n: usize, l: usize },
    #[error("fold {fold}: complement has {size} observations, need at least {needed}")]
    FoldTooSmall { fold: usize, size: usize, needed: usize },

    #[error("treatment value {0} is outside the treatment space")]
    TreatmentOutOfSpace(f64),
    #[error(
        "deterministic (point-mass) policies are not pathwise differentiable; \
         use a randomized family with a bounded density"
    )]
    DeterministicPolicy,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("quadrature produced a non-finite value")]
    QuadratureFailure,

    #[error("indicator basis requires a discrete treatment space")]
    IndicatorOnContinuous,
    #[error("point outside basis domain: {0}")]
    PointOutOfDomain(String),
    #[error("Gram matrix is singular (smallest eigenvalue {min_eig:.3e}); reduce the number of basis functions")]
    SingularGram { min_eig: f64 },

    #[error("stabilized-weight dual did not converge in {} iterations (gradient norm {:.3e})", .0.iterations, .0.grad_norm)]
    WeightsNotConverged(Box<WeightFit>),
    #[error("design matrix is rank deficient and ridge = 0")]
    SingularDesign,

    #[error("overlap violated at observation {index}: propensity {value:.3e} below f_min = {f_min:.3e}")]
    OverlapViolation { index: usize, value: f64, f_min: f64 },
    #[error("{failed} of {total} bootstrap draws failed")]
    BootstrapFailure { failed: usize, total: usize },

    #[error("curvature matrix is degenerate (eigenvalues in [{min_eig:.3e}, {max_eig:.3e}])")]
    DegenerateCurvature { min_eig: f64, max_eig: f64 },
    #[error("matrix `{0}` is not positive semidefinite")]
    NotPsd(String),
    #[error("covariance kernel is not PSD after clipping (eigenvalue {min_eig:.3e}, trace {trace:.3e})")]
    KernelNotPsd { min_eig: f64, trace: f64 },

    #[error("{failed} of {total} Monte Carlo replications failed")]
    StudyFailed { failed: usize, total: usize },

    #[error("expression `{expr}`: {msg}")]
    Expression { expr: String, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            MissingColumn(_)
            | NonNumericCell { .. }
            | TreatmentNotInLevels(_)
            | EmptyFile
            | InvalidData(_)
            | TreatmentOutOfSpace(_)
            | PointOutOfDomain(_)
            | OverlapViolation { .. }
            | FoldTooSmall { .. }
            | Io(_)
            | Csv(_) => ErrorClass::Data,
            InvalidTreatmentSpace(_)
            | BadFoldCount { .. }
            | DeterministicPolicy
            | InvalidPolicy(_)
            | IndicatorOnContinuous
            | Expression { .. }
            | InvalidArgument(_)
            | Config(_) => ErrorClass::Config,
            QuadratureFailure
            | SingularGram { .. }
            | WeightsNotConverged(_)
            | SingularDesign
            | BootstrapFailure { .. }
            | DegenerateCurvature { .. }
            | NotPsd(_)
            | KernelNotPsd { .. }
            | StudyFailed { .. } => ErrorClass::Numerical,
        }
    }
}
