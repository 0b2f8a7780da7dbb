use thiserror::Error;

/// Errors produced by the unlearning laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PiuError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// No identity fell within the tolerance band around `tau`.
    #[error("no anchor within tolerance: closest |s_j - tau| was {nearest_gap}")]
    NoAnchorFound { nearest_gap: f64 },

    #[error("degenerate schedule at t={0}: alpha_bar is zero")]
    DegenerateSchedule(usize),

    #[error("observation is unrecognizable: identity projection vanished")]
    Unrecognizable,

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("singular linear system in closed-form edit")]
    SingularSystem,

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, PiuError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(PiuError::InvalidArgument(msg.into()))
}
