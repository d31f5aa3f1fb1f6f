//! Patch-based cloud / cloud-shadow masking engine.
//!
//! The pipeline classifies the central pixel of 15x15 multispectral
//! windows with a small residual network and sweeps that classifier over
//! whole scenes to produce masks. Everything numeric is generic over the
//! storage scalar (`f32` for production runs, `f64` for gradient
//! verification); reductions always accumulate in f64.

pub mod error;
pub mod experiment;
pub mod format;
pub mod infer;
pub mod metrics;
pub mod ops;
pub mod resnet;
pub mod sampler;
pub mod scalar;
pub mod scene;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Production-precision tensor (the checkpoint storage type).
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor (gradient checks run at 64 bit).
pub type Tensor64 = Tensor<f64>;
