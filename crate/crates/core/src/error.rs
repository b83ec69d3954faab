use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape conflict in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class distribution undefined: {0}")]
    UndefinedDistribution(String),

    #[error("bisection did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("projected descent diverged at step {step} (objective {objective})")]
    Diverged { step: usize, objective: f64 },

    #[error("non-finite loss at iteration {iteration}: loss_d={loss_d} loss_g={loss_g} loss_reg={loss_reg}")]
    NonFiniteLoss {
        iteration: usize,
        loss_d: f64,
        loss_g: f64,
        loss_reg: f64,
    },

    #[error("config error at key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
