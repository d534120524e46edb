use thiserror::Error;

pub type Result<T> = std::result::Result<T, IuqError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IuqError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model `{model}` failed at x = {x:?}, theta = {theta:?}: {reason}")]
    ModelFailure {
        model: String,
        x: Vec<f64>,
        theta: Vec<f64>,
        reason: String,
    },

    #[error("finite-difference failure for parameter {param}: {reason}")]
    SensitivityFailure { param: usize, reason: String },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("singular normal equations: sensitivity columns {first} and {second} are collinear (|cos| = {cosine:.6})")]
    Collinear {
        first: usize,
        second: usize,
        cosine: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("iteration diverged: {0}")]
    Divergence(String),

    #[error("experimental spectrum vanishes; average amplitude undefined")]
    ZeroSpectrum,

    #[error("coverage level {level} not bracketed by the curve (attainable range [{min}, {max}]); expand the parameter design")]
    LevelNotBracketed { level: f64, min: f64, max: f64 },

    #[error("pseudo-CDF is not monotone; bounds refused")]
    NonMonotone,

    #[error("level {level} is matched at several separated parameter values; bounds refused")]
    NonInjective { level: f64 },

    #[error("bias term needs at least {needed} experiments, got {got}; disable the bias term")]
    TooFewExperiments { needed: usize, got: usize },

    #[error("surrogate validation RMSE {rmse:e} exceeds 10% of output range {range:e}; increase the training budget")]
    SurrogateInadequate { rmse: f64, range: f64 },

    #[error("log target is not finite at the initial state")]
    NonFiniteInit,

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("{failed} of {total} model evaluations failed (limit 1%)")]
    TooManyFailures { failed: usize, total: usize },
}

impl IuqError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        IuqError::InvalidInput(msg.into())
    }
}
