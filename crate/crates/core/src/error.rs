use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("composition undefined: background vanishes at state {state} where a conditional is positive")]
    UndefinedComposition { state: usize },

    #[error("closed-form composition unsupported: {0}")]
    UnsupportedClosedForm(String),

    #[error("composed density is not integrable: {0}")]
    NonIntegrable(String),

    #[error("sampler diverged at step {step}")]
    SamplerDivergence { step: usize },

    #[error("degenerate concept {index}: mean difference vector is zero")]
    DegenerateConcept { index: usize },

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
