//! Reverse-mode differentiable tensor engine and its finite-difference oracle.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{compare_gradients, evaluate, finite_diff_grad, value_and_grad, GradComparison};
pub use graph::{Graph, SoftmaxMask, Var};
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{log_sum_exp_slice, masked_softmax_row};
