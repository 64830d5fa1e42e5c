use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum PdmError {
    /// A caller broke a shape or precondition contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Input that is well-formed but mathematically degenerate (zero norms etc).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A NaN or infinity showed up; `component` names where.
    #[error("numeric failure in {component}: {detail}")]
    Numeric { component: String, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PdmError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        PdmError::Contract(msg.into())
    }

    pub(crate) fn numeric(component: impl Into<String>, detail: impl Into<String>) -> Self {
        PdmError::Numeric {
            component: component.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PdmError>;
