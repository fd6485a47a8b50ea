//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Graphs are define-by-run: every forward pass records onto a fresh [`Tape`],
//! and [`Tape::backward`] consumes it. All reductions run sequentially in
//! row-major order, so results are bit-identical across runs.

mod error;
mod kernels;
mod optim;
mod scalar;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use error::TensorError;
pub use kernels::{gemm, gemm_nt, gemm_tn};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
