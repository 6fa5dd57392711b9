//! Differentially private fine-tuning of a classifier-free diffusion model
//! through low-dimensional convolutional adapters, at desk scale.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod adapters;
pub mod data;
pub mod diffusion;
pub mod dp;
pub mod error;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

/// Model-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used for gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type Graph32 = Graph<f32>;
