use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension {n} exceeds the cap of {max}")]
    DimensionTooLarge { n: usize, max: usize },
    #[error("coordinate {index} out of range for dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("measure has zero total mass")]
    ZeroMass,
    #[error("measure is not normalized (total mass {mass})")]
    NotNormalized { mass: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("kernel is not ergodic (gap {gap:e})")]
    NotErgodic { gap: f64 },
    #[error("vectors are not orthogonal (inner product {inner:e})")]
    NotOrthogonal { inner: f64 },
    #[error("magnetization {s} has the wrong parity for n = {n}")]
    Parity { s: i64, n: usize },
    #[error("step size underflow after {halvings} halvings")]
    StepUnderflow { halvings: usize },
    #[error("positive semidefiniteness violated (min eigenvalue {min_eig:e})")]
    PsdViolation { min_eig: f64 },
    #[error("step budget of {budget} exhausted")]
    BudgetExceeded { budget: usize },
    #[error("drift state outside the ball: |X|^2 = {norm_sq:e} >= delta = {delta:e}")]
    OutsideBall { norm_sq: f64, delta: f64 },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
