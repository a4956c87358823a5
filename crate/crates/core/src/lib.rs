//! Gradient-feature alignment (GFA) training, adversarial attacks and
//! loss-landscape analysis for small image classifiers.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! command-line harness uses.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gfa;
pub mod nn;
mod parallel;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Var = autodiff::Var<f64>;
pub type ModelState = nn::ModelState<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Var32 = autodiff::Var<f32>;
pub type ModelState32 = nn::ModelState<f32>;

/// Toolkit version recorded in every artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
