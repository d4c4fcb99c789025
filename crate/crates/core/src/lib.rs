//! Dynamic functional network connectivity (dFNC) classification with a
//! convolutional stem and factorized spatio-temporal sparse self-attention.
//!
//! The crate is organised bottom-up: [`tensor`], [`graph`] and [`norm`] form
//! a small reverse-mode autodiff engine; [`dfnc`] turns network time courses
//! into windowed correlation stacks; [`model`], [`train`], [`eval`] and
//! [`interpret`] build, fit, score and explain the classifier; [`synth`]
//! produces cohorts with planted connectivity effects.

pub mod dfnc;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod heap;
pub mod interpret;
mod kernels;
pub mod model;
pub mod norm;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{reverse_grad, Graph, Var};
pub use tensor::Tensor;
