//! Building blocks for information-bottleneck language-model training:
//! a small reverse-mode autograd engine, matrix-based entropy of layer
//! representations, the gated memorization/compression phase controller,
//! gradient-alignment diagnostics, the reference models and the synthetic tasks.

pub mod autograd;
pub mod diagnostics;
pub mod entropy;
pub mod gapt;
mod kernels;
pub mod linalg;
pub mod nets;
pub mod tasks;
pub mod tensor;

pub use autograd::{grad_check, AutogradError, Tape, Var};
pub use tensor::Tensor;
