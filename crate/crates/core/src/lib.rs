//! Hierarchical attention head for multi-layer speech features, with a joint
//! cross-entropy and margin-contrastive objective.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod training;
pub mod tensor;

pub use error::{Error, ParseError, Result};
pub use label::Label;
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type HierCon64 = model::HierCon<f64>;
pub type HierCon32 = model::HierCon<f32>;
pub type FeatureStack64 = model::FeatureStack<f64>;
pub type FeatureStack32 = model::FeatureStack<f32>;
