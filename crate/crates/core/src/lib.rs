//! Joint video moment retrieval and highlight detection with a
//! task-reciprocal DETR-style model, built on a small reverse-mode autodiff
//! engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the command-line tool and the
//! gradient checks use.

pub mod align;
pub mod checkpoint;
pub mod cooperate;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod refine;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type FeatureBundle = data::FeatureBundle<f64>;
pub type Model = model::Model<f64>;
pub type Trainer = trainer::Trainer<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
