//! Training-free local control for a miniature latent-diffusion model.
//!
//! The crate bundles a small denoiser trained on synthetic shape scenes, a
//! control branch fed with edge maps, and the guidance operators that keep a
//! local structural condition from crowding out the rest of the prompt.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod eval;
pub mod guidance;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod scalar;
pub mod scenes;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

/// 64-bit tensor, the default for verification.
pub type Tensor64 = numerics::Tensor<f64>;
/// 32-bit tensor, used for training and fast sampling.
pub type Tensor32 = numerics::Tensor<f32>;
pub type Weights64 = model::DenoiserWeights<f64>;
pub type Weights32 = model::DenoiserWeights<f32>;
pub type Checkpoint32 = model::checkpoint::Checkpoint<f32>;
