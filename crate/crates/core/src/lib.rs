//! Semi-supervised segmentation with a dual-branch pyramid network trained
//! under cross-pyramid consistency regularization.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training and for gradient checks.

pub mod checkpoint;
pub mod data;
pub mod dbpnet;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor4;

/// Training precision.
pub type Network32 = dbpnet::Network<f32>;
/// Double precision, used by finite-difference checks.
pub type Network64 = dbpnet::Network<f64>;
pub type Tensor32 = Tensor4<f32>;
pub type Tensor64 = Tensor4<f64>;
pub type Pyramids32 = dbpnet::BranchPyramids<f32>;
pub type Pyramids64 = dbpnet::BranchPyramids<f64>;
