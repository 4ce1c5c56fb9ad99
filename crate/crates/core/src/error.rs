use thiserror::Error;

use crate::scalefit::QuadFit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree for the named graph node or operation.
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    /// A configuration or graph that cannot be built as requested.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("gradient requested through non-differentiable index output of node {0}")]
    NonDifferentiable(String),

    #[error("quadratic fit has no interior minimum (curvature {})", .0.curvature)]
    NoInteriorMinimum(Box<QuadFit>),

    #[error("target loss {loss} is at or below the baseline floor {floor}")]
    BelowFloor { loss: f64, floor: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serialize(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
