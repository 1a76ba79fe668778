//! Noise-aware training for non-volatile compute-in-memory accelerators.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), the
//! NVM device-variation model ([`device`]), desk-scale networks ([`models`]),
//! the vanilla / noise-injection / oriented-variational-forward training
//! regimes ([`training`]) and Monte Carlo robustness metrics ([`evaluation`]).
//!
//! Everything numeric is generic over [`Real`]; the aliases below fix the
//! precision used by the command-line driver.

pub mod checkpoint;
pub mod data;
pub mod device;
pub mod error;
pub mod evaluation;
pub mod graph;
mod kernels;
pub mod models;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

/// Element type used by the command-line driver.
pub type Float = f32;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = models::ParamSet<f32>;
pub type ParamSet64 = models::ParamSet<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
