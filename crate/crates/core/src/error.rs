use alloc::string::String;

/// Errors raised by the governor, detector and set machinery.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("closed-loop matrix is not strictly Schur (spectral radius {spectral_radius})")]
    NotSchur { spectral_radius: f64 },
    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NonPsdInput(&'static str),
    #[error("matrix is not symmetric positive definite: {0}")]
    NonPdInput(&'static str),
    #[error("probability {0} is outside (0, 1)")]
    InvalidProbability(f64),
    #[error("tightened chance-constraint set is empty")]
    EmptyTightenedSet,
    #[error("set is empty: {0}")]
    EmptySet(&'static str),
    #[error("set is unbounded in an inclusion or support query")]
    UnboundedSet,
    #[error("singular matrix: {0}")]
    SingularMatrix(&'static str),
    #[error("set recursion not finitely determined within {cap} steps")]
    NotDeterminedWithinCap { cap: usize },
    #[error("infeasible start: (x, v_prev) admits no admissible plan")]
    InfeasibleStart,
    #[error("kappa entry {0} outside [0, 1]")]
    KappaOutOfRange(f64),
    #[error("residual covariance is singular")]
    SingularResidualCovariance,
    #[error("all hypothesis likelihoods are zero")]
    AllZeroLikelihoods,
    #[error("detection interval incomplete ({window} of {t_d} samples)")]
    IntervalIncomplete { window: usize, t_d: usize },
    #[error("state is not recoverable within the recovery horizon")]
    InfeasibleRecovery,
    #[error("timing violates T_r < T_e - 2 T_d (T_r = {t_r}, T_e = {t_e}, T_d = {t_d})")]
    TimingViolation { t_r: usize, t_e: usize, t_d: usize },
    #[error("dimension too large for brute-force oracle: {0}")]
    DimensionTooLarge(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("solver failure: {0}")]
    SolverError(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dims(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
