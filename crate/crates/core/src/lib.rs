//! PatchVAE: a patch-structured variational autoencoder for unsupervised
//! mid-level representation learning, with its training, probing and
//! visualization tooling.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; gradient checks run in `f64`.

pub mod certify;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod probe;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Tensor, TensorSpec};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Graph32 = nn::Graph<f32>;
pub type Graph64 = nn::Graph<f64>;
