//! Building blocks shared by the coordinator and the simulated device fleet.
//!
//! - [`model`]: the canonical flat-vector model and the two platform encodings.
//! - [`trainer`]: get/set/fit/evaluate/predict over the `Linear` and `Mlp` architectures.
//! - [`aggregation`]: FedAvg plus client-side clipping and Gaussian noise.
//! - [`analytics`]: local-DP federated analytics (k-ary randomized response, heavy hitters, DP means).
//! - [`protocol`]: length-prefixed JSON framing used on every session port.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod analytics;
pub mod model;
pub mod protocol;
pub mod seed;
pub mod trainer;

pub use model::{Arch, CanonicalModel, LayerSpec, ModelSpec, Platform, PlatformEncoding, Tensor};
