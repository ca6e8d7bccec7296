use thiserror::Error;

/// Broad failure classes; each maps to one process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    /// Bad input, unmet precondition or failed hypothesis check.
    Validation,
    /// Picard divergence, NaN/Inf, unusable regression.
    Numerical,
    /// An experiment ran but one of its asserted properties failed.
    Experiment,
}

impl FailureClass {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureClass::Validation => 2,
            FailureClass::Numerical => 3,
            FailureClass::Experiment => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum BsdeError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("HYPOTHESIS_FAIL: {0}")]
    Hypothesis(String),

    #[error("picard iteration failed at step {step}, path {path}: residual {residual:e}")]
    PicardDivergence {
        step: usize,
        path: usize,
        residual: f64,
    },

    #[error("non-finite value in {context} at path {path}, step {step}")]
    NonFinite {
        context: &'static str,
        path: usize,
        step: usize,
    },

    #[error("regression ill-conditioned at step {step}: condition number {cond:e} even at degree 0")]
    IllConditioned { step: usize, cond: f64 },

    #[error("CFL violation: {0}")]
    Cfl(String),

    #[error("experiment assertion failed: {0}")]
    Experiment(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl BsdeError {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        BsdeError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> FailureClass {
        match self {
            BsdeError::InvalidParameter { .. }
            | BsdeError::UnknownGenerator(_)
            | BsdeError::UnknownKey(_)
            | BsdeError::Dimension(_)
            | BsdeError::Hypothesis(_)
            | BsdeError::Cfl(_)
            | BsdeError::Io(_) => FailureClass::Validation,
            BsdeError::PicardDivergence { .. }
            | BsdeError::NonFinite { .. }
            | BsdeError::IllConditioned { .. } => FailureClass::Numerical,
            BsdeError::Experiment(_) => FailureClass::Experiment,
        }
    }

    /// Short machine-parsable tag used on the diagnostic line.
    pub fn tag(&self) -> &'static str {
        match self {
            BsdeError::InvalidParameter { .. } => "INVALID_PARAMETER",
            BsdeError::UnknownGenerator(_) => "UNKNOWN_GENERATOR",
            BsdeError::UnknownKey(_) => "UNKNOWN_KEY",
            BsdeError::Dimension(_) => "DIMENSION",
            BsdeError::Hypothesis(_) => "HYPOTHESIS_FAIL",
            BsdeError::PicardDivergence { .. } => "PICARD_DIVERGENCE",
            BsdeError::NonFinite { .. } => "NON_FINITE",
            BsdeError::IllConditioned { .. } => "ILL_CONDITIONED",
            BsdeError::Cfl(_) => "CFL",
            BsdeError::Experiment(_) => "EXPERIMENT_FAIL",
            BsdeError::Io(_) => "IO",
        }
    }
}

pub type Result<T> = std::result::Result<T, BsdeError>;
