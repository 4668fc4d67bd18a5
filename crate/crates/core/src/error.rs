//! Error type shared by the differentiable core.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input extents do not conform to an operation's shape rule. `op` names
    /// the primitive or operation, `detail` the offending extents.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid label id {label} for {classes} classes")]
    InvalidLabel { label: u32, classes: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Unsupported(String),
}
