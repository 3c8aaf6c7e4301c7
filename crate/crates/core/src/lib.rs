//! Evolutionary synthesis of sparse neural networks.
//!
//! A trained ancestor's absolute weights become per-synapse inheritance
//! probabilities ([`heredity`]). Scaled by an environmental retention budget
//! and sampled against uniform draws, they yield a descendant topology
//! ([`synthesis`]) that is trained from scratch ([`nn`]) and scored
//! ([`metrics`]). [`evolution`] chains this over generations and persists
//! each one ([`checkpoint`], [`lineage`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evolution;
pub mod heredity;
pub mod lineage;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod synthesis;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision network, the training default.
pub type Network32 = nn::Network<f32>;
/// Double-precision network, used by gradient checks and other oracles.
pub type Network64 = nn::Network<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Sample32 = data::Sample<f32>;
