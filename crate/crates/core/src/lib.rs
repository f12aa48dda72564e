//! Adversarial generative models with encoders, the losses that push the
//! encoder to invert the generator, and the Fréchet evaluation pipeline.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pin the
//! common instantiations.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod scalar;
pub mod tensor;

pub use scalar::{Dtype, Scalar};
pub use tensor::{ShapeError, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ModelBundle32 = models::ModelBundle<f32>;
pub type ModelBundle64 = models::ModelBundle<f64>;
pub type GaussianMoments64 = eval::GaussianMoments<f64>;
pub type TabularGame64 = oracle::TabularGame<f64>;

/// Seeded generator used by every sampler.
pub type Rng = rand_chacha::ChaCha8Rng;
