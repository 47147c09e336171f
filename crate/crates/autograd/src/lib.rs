//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; a [`Tape`] records every operation applied to
//! them and pulls gradients back with [`Tape::backward`]. Elements are `f32`
//! for training and `f64` when gradients are checked against finite
//! differences ([`gradcheck`]).

mod error;
pub mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{OpKind, Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;
