//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

pub mod attention;
mod gradcheck;
mod graph;
pub mod kernels;

pub use attention::AttnGroups;
pub use gradcheck::{grad_check, grad_check_store, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
