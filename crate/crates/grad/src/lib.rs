//! Minimal reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`] pulls an
//! output cotangent back to every leaf that asked for gradients. The op set is exactly
//! what small conv/attention networks need: convolution, affine maps, group norm,
//! SiLU, cross-attention with ragged key lengths, and a few reshapes.
//!
//! Everything is generic over [`Float`] so the same network code runs in `f32` for
//! speed and in `f64` for finite-difference checks.

mod float;
mod optim;
mod tape;
mod tensor;

pub use float::{gemm, Float};
pub use optim::Adam;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
