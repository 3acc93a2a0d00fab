//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! The op set is exactly what the detector needs; the heavier ops (attention,
//! convolution, layer norm, losses) are fused with hand-written backward
//! passes. Matrix products go through `matrixmultiply`.

mod params;
mod real;
mod tape;
mod tensor;

pub use params::{Adam, ParamStore};
pub use real::Real;
pub use tape::{ConvGeom, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
