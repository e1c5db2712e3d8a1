//! Dense tensors, the attention-map operators, and differentiation.

pub mod conv;
pub mod gaussian;
pub mod grad;
pub mod softmax;
pub mod tape;
mod tensor;

pub use gaussian::{gaussian_smooth, GaussianKernel};
pub use grad::{central_difference, grad_wrt_latent, relative_error, Objective};
pub use softmax::softmax_rows;
pub use tape::{fuse_values, Grads, Tape, Var};
pub use tensor::{gemm, Tensor};
