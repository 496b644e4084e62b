//! Sparse convolution engine for CNN inference.
//!
//! Feature maps are compressed into one of two row-oriented formats before
//! convolution so that zero activations are never multiplied:
//!
//! * [`ecr`]: Extended and Compressed Row. Each convolution window keeps only
//!   its nonzeros paired with the matching kernel weights, and convolution
//!   becomes a ragged sparse matrix-vector product.
//! * [`pecr`]: Pooling-pack ECR. Windows are grouped by the pooling window
//!   they feed, so convolution, ReLU and max pooling run in one pass without
//!   materializing the convolution output.
//!
//! Work is mapped onto a simulated block/thread grid ([`execmodel`]) whose
//! results are independent of the worker count. Dense reference operations
//! live in [`tensor`], analytic op-count and traffic models in [`metrics`].
//!
//! All numeric code is generic over [`Scalar`]; the `*F32` / `*F64` aliases
//! below name the common instantiations.

pub mod cli;
pub mod dataset;
pub mod ecr;
pub mod error;
pub mod execmodel;
pub mod metrics;
pub mod pecr;
pub mod pipeline;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use ecr::{EcrBlockRow, EcrMap};
pub use execmodel::{ExecConfig, Grid, LayoutFormat};
pub use metrics::{OpCount, TrafficReport};
pub use pecr::{PecrMap, PecrPoolPack};
pub use pipeline::{LayerSpec, NetworkSpec};
pub use tensor::{
    ConvConfig, ConvGeometry, ConvPoolGeometry, FeatureMap, Filter, PoolConfig, PoolMode,
};

pub type FeatureMapF32 = FeatureMap<f32>;
pub type FeatureMapF64 = FeatureMap<f64>;
pub type FilterF32 = Filter<f32>;
pub type FilterF64 = Filter<f64>;
pub type EcrMapF32 = EcrMap<f32>;
pub type EcrMapF64 = EcrMap<f64>;
pub type PecrMapF32 = PecrMap<f32>;
pub type PecrMapF64 = PecrMap<f64>;
pub type NetworkSpecF32 = NetworkSpec<f32>;
pub type NetworkSpecF64 = NetworkSpec<f64>;
