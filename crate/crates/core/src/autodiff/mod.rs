//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations in topological order, computing each
//! value as it is appended. [`Graph::backward`] sweeps the recorded nodes
//! in reverse from a scalar seed. [`grad_check`] compares the analytic
//! gradients against central differences.

mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, numeric_gradient, relative_error};
pub use graph::{Bindings, Gradients, Graph, NodeId, Unary};
pub use kernels::Padding;
