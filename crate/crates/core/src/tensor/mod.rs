//! Dense tensors, a reverse-mode tape, and a finite-difference oracle.

mod check;
mod dense;
mod graph;
mod params;

pub use check::{analytic_grads, compare, loss_value, numeric_grad, rel_error, GradReport, LossBuilder, Selection};
pub use dense::{bilinear_resize, matmul, softmax_along, Real, Tensor};
pub use graph::{Gradients, Graph, NodeId, Unary};
pub use params::ParamStore;
