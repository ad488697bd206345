//! Token timestep allocation for classifier-guided simplex diffusion language
//! models, together with the numerics they rest on.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Schedule64 = diffusion::NoiseSchedule<f64>;
pub type Schedule32 = diffusion::NoiseSchedule<f32>;
pub type State64 = diffusion::SimplexState<f64>;
pub type State32 = diffusion::SimplexState<f32>;
pub type Denoiser64 = models::Denoiser<f64>;
pub type Denoiser32 = models::Denoiser<f32>;
pub type Classifier64 = models::Classifier<f64>;
pub type Classifier32 = models::Classifier<f32>;
