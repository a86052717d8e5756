//! Weakly supervised 3D vessel segmentation.
//!
//! Trains a 3D segmentation network from unlabeled volumes plus
//! structure-agnostic 2D vessel masks: contrastive region discrimination
//! clusters semantically consistent voxels, an adversarial loss on maximum
//! intensity projections imposes tree-shaped morphology, a temporal
//! consistency loss against an EMA teacher stabilizes training, and a
//! reliability-refinement stage self-trains on confidence-filtered pseudo
//! labels.
//!
//! The numeric core is generic over the scalar type: training runs at `f32`,
//! verification suites at `f64`.

pub mod autodiff;
pub mod error;
pub mod fields;
pub mod orientation;
pub mod rng;
pub mod sys;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete type aliases for the common instantiations.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Volume32 = fields::Volume3D<f32>;
pub type Volume64 = fields::Volume3D<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
