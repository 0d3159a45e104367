//! Task-aware safe channel pruning and feature distillation for a toy
//! multi-task convnet.
//!
//! The crate is generic over the scalar type: the training pipeline runs at
//! `f32` (matching checkpoint storage bit-for-bit), while tests instantiate
//! `f64` for tight finite-difference oracles.

pub mod autodiff;
pub mod config;
pub mod conflict;
pub mod distill;
pub mod error;
pub mod eval;
pub mod importance;
pub mod model;
pub mod pipeline;
pub mod pruner;
pub mod rng;
pub mod scalar;
pub mod stats_file;
pub mod testutil;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type the CLI pipeline runs at. Checkpoints store fp32, so running
/// at f32 keeps save/load round-trips bit-exact.
pub type PipelineScalar = f32;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
