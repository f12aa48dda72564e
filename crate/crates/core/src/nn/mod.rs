//! Layers, normalizers, parameter storage and the Adam optimizer.

mod adam;
mod layers;
mod network;
mod params;
mod spectral;

pub use adam::{adam_step, AdamConfig, AdamState, StepOutcome, LR_GRID};
pub use layers::{
    add_channel_bias, affine, conv2d, layer_norm, layer_norm_values, transpose_conv2d, Activation, Dense, ImageShape,
    LayerKind, LayerSpec, Normalizer, LAYER_NORM_EPS, LEAKY_SLOPE,
};
pub use network::{Bound, Network, NetworkSpec};
pub use params::ParamSet;
pub use spectral::{spectral_norm, spectral_normalize_var, SpectralNormed, SpectralState, SIGMA_EPS};

use crate::autodiff::AutodiffError;
use crate::tensor::ShapeError;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] ShapeError),
}
