//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values are recorded on a [`Tape`]; [`Tape::backward`] pushes gradients of
//! a scalar loss back to every leaf created with `requires_grad`.
//! Broadcasting is limited to the explicit [`Tape::add_row`] and
//! [`Tape::mul_col`] helpers.

mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Tape, Var, REGISTERED_OPS};
pub use tensor::Tensor;
