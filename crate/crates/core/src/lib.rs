//! Mixed-precision expert quantization and learnable expert pruning for
//! toy mixture-of-experts language models.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with a reverse-mode autodiff tape.
//! * [`moe`]: the toy decoder-only MoE model, its synthetic corpus and
//!   teacher training.
//! * [`quant`]: round-to-nearest, binarisation, Hessian-compensated
//!   quantization and bit-exact packing.
//! * [`importance`]: calibration statistics and the per-bit error table.
//! * [`allocator`]: exact bit-width allocation under budget and coverage
//!   constraints.
//! * [`otp`]: learnable top-any expert pruning with Gumbel-Softmax masks.
//! * [`pipeline`]: file formats, evaluation, accounting and CLI stages.

pub mod allocator;
pub mod error;
pub mod importance;
pub mod moe;
pub mod optim;
pub mod otp;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
