//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles and
//! replays them in reverse on [`Graph::backward`]. Values are immutable once
//! written; gradients are accumulated in a separate buffer per node and only
//! for nodes that depend on a parameter.
//!
//! Convolutions use the cross-correlation convention (the kernel is not
//! flipped), matching common neural-network libraries.
//!
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod param;
mod real;
pub mod suite;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, relative_error, Failure, GradCheckConfig, GradCheckReport};
pub use graph::{BackwardFn, GradSink, Gradients, Graph, Var};
pub use ops::reflect_index;
pub use param::{Bound, ParamSet};
pub use real::Real;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
