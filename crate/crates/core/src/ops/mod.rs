//! Differentiable kernels, implemented as methods on [`crate::tape::Tape`].

mod conv;
mod elementwise;
mod matmul;
mod norm;
mod quantize;
mod reduce;
mod resample;
mod shape_ops;
mod softmax;

pub use norm::NORM_EPS;
