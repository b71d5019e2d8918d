//! Single- and multi-channel end-to-end neural diarization with mutual
//! learning: a co-attention encoder that degenerates exactly to a Transformer
//! encoder at one channel, permutation-free BCE and logit-distillation
//! losses, a synthetic multi-channel conversation simulator, and a DER
//! scorer, all on a small reverse-mode autodiff core.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the two supported precisions.

pub mod audio;
pub mod features;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
