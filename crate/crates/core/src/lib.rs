//! Underwater image enhancement, end to end: a small verified-gradient
//! tensor engine, a dual-transformer U-shaped generator with a
//! multi-scale discriminator, color-space losses in RGB/LAB/LCH,
//! no-reference quality metrics, a training loop, and the reference
//! curation pipeline behind the `uieforge` CLI.

pub mod checkpoint;
pub mod color;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, VarId};
pub use tensor::{Dtype, Scalar, Tensor, TensorError};
