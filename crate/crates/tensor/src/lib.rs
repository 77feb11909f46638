//! Minimal dense-tensor core with reverse-mode differentiation.
//!
//! Values are 64-bit floats. A [`Graph`] is rebuilt for every evaluation
//! (define-by-run); parameters live in a [`ParamStore`] and are copied into
//! the graph as leaves, so a parameter read twice accumulates both paths.

pub mod check;
pub mod error;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use check::{finite_diff_check, finite_diff_check_params, relative_error};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
