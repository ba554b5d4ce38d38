//! Differentiable computation substrate: tensors, a recording tape with
//! exact reverse-mode gradients, parameter groups and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    analytic_grads, compare_gradients, grad_check, relative_error, GradCheckConfig,
    GradCheckReport,
};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("parameter {0} is not reachable from the loss")]
    DisconnectedParameter(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}
