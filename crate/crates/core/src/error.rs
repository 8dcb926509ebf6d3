use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (after jitter escalation to {jitter:e})")]
    NotSpd { jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("eigen solver did not converge after {0} sweeps")]
    NoConverge(usize),
    #[error("function evaluation was not finite at coordinate {0}")]
    NonFiniteEval(usize),
    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(usize),
    #[error("gradient tape does not match the network ({0})")]
    TapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("operation not supported for the {0} score model")]
    UnsupportedVariant(&'static str),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("quadrature oracle unavailable: {0}")]
    OracleUnavailable(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has no labels")]
    MissingLabels,
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotSpd { .. }
                | Error::NoConverge(_)
                | Error::NonFiniteEval(_)
                | Error::NonFiniteActivation(_)
                | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(what: impl Into<String>) -> Error {
    Error::DimMismatch(what.into())
}
