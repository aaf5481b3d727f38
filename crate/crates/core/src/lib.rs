//! Flexible-compression spatiotemporal tokeniser and latent transformer for
//! autoregressive emulation of physical fields, with the metrics, data
//! plumbing and training stages around them.
//!
//! Numerics are generic over [`scalar::Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod processor;
pub mod run;
pub mod scalar;
pub mod schedule;
pub mod spectral;
pub mod tensor;
pub mod tokeniser;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Emulator32 = model::Emulator<f32>;
pub type Emulator64 = model::Emulator<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
