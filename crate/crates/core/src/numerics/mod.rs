//! Dense tensors and the exact kernels the rest of the engine builds on.
//!
//! Everything computes in `f64` with a fixed summation order so repeated runs
//! are bit-identical.

mod ops;
mod tensor;

pub use ops::{
    bilinear_resize, gelu, gelu_grad_scalar, gelu_scalar, layer_norm, linear, matmul,
    matmul_transposed, moments, normal_cdf, normal_pdf, softmax_in_place, softmax_rows,
};
pub use tensor::{dot, l2_norm, Tensor};
