//! Dense tensors and reverse-mode differentiation for small MLP/CNN models.

mod eval;
mod graph;
pub mod kernels;
mod tensor;

pub use eval::{
    differentiate, evaluate_loss, evaluate_with_gradients, finite_difference_gradient,
    gradient_check_ratio, GradientRecord, Network, Objective, Wants,
};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Param, ParamSet, Scalar, Tensor};
