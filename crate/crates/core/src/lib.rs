//! Semi-supervised video object segmentation with non-local pixel matching
//! and channel attention, built on a small dense-tensor engine with
//! reverse-mode differentiation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common use.

pub mod attention;
pub mod checkpoint;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod layers;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod propagation;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, ParamId, ParamStore, ParamTensor, Var};
pub use model::{Model, ModelConfig};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type GraphF64 = Graph<f64>;
pub type GraphF32 = Graph<f32>;
pub type ModelF64 = Model<f64>;
pub type ModelF32 = Model<f32>;
pub type FeatureMapF64 = matching::FeatureMap<f64>;
pub type FeatureMapF32 = matching::FeatureMap<f32>;
