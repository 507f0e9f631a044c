//! Semi-supervised dual-modality segmentation: two modality-specific U-Net
//! branches with channel-attention enhancement and a shared fused
//! bottleneck feature, trained on labeled and unlabeled slices together.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Use the
//! concrete aliases below unless you need the other precision.

pub mod cli;
pub mod data;
pub mod evaluation;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod trainer;
pub mod volume_io;

pub use scalar::Scalar;

/// Single-precision dual-branch model used for training.
pub type Model = network::DualBranchNet<f32>;
/// Double-precision model used for gradient verification.
pub type Model64 = network::DualBranchNet<f64>;
pub type Prediction = network::DualPrediction<f32>;
