//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op applied to [`Var`] handles; calling
//! [`Graph::backward`] on a scalar sweeps the record in reverse and leaves
//! gradients on the leaves created with `requires_grad`. [`grad_check`]
//! verifies any scalar function of a tensor against central differences.

mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_report, relative_error, GradCheckReport};
pub use graph::{Graph, NodeRecord, Var, MASK_VALUE};
pub use tensor::Tensor;
