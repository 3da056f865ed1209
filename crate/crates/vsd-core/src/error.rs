//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Element count does not match the requested shape.
    #[error("cannot view {len} elements as shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },

    /// Elementwise domain violation (log of a non-positive value, division by zero, ...).
    #[error("domain error in {op}: {what}")]
    Domain { op: &'static str, what: String },

    /// A tensor that must be finite contains NaN or Inf.
    #[error("non-finite value in {ctx}: {what}")]
    NonFinite { ctx: &'static str, what: String },

    /// Invalid configuration of a layer, objective, or training run.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training aborted because the objective diverged.
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    /// Checkpoint or report serialization failure.
    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
