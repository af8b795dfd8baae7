//! Deterministic single-process simulator for federated learning under
//! label distribution shift.
//!
//! The crate provides a small dense network with hand-written
//! backpropagation ([`nn`]), the local objectives ([`losses`]): plain and
//! prior-calibrated cross-entropy, empty-class distillation, logit
//! suppression, and a proximal term, label-skew partitioners ([`partition`]),
//! dataset loading ([`data`]), the round loop ([`engine`]) and reporting
//! ([`metrics`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the element type; experiments default to double precision.

pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod partition;
pub mod rng;
pub mod scalar;

pub use error::{Error, ErrorFamily, Result};
pub use scalar::Scalar;

pub type Mlp64 = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
pub type Gradients64 = nn::Gradients<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Batch64 = data::Batch<f64>;
pub type LossResult64 = losses::LossResult<f64>;
pub type LossResult32 = losses::LossResult<f32>;
pub type ExperimentRun64 = engine::ExperimentRun<f64>;
