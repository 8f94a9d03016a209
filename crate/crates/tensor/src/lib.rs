//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. Parameters live in a [`ParamStore`]; a
//! [`Graph`] records one forward pass over them and [`Graph::backward`]
//! returns [`Gradients`] for every trainable leaf.

mod error;
pub mod flops;
mod gradcheck;
mod graph;
mod kernel;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
