//! PatchVAE and the beta-VAE baseline.

pub mod betavae;
pub mod config;
pub mod patchvae;
pub mod trunk;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use betavae::{BetaForward, BetaVae};
pub use config::{ModelConfig, ModelKind, GRID_STRIDE};
pub use patchvae::{assemble, PatchForward, PatchLatentCode, PatchNoise, PatchPosterior, PatchVae};
pub use trunk::{TrunkLayout, TRUNK_PREFIX};

use crate::distributions;
use crate::error::Result;
use crate::nn::{LayerStack, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Model {
    Patch(PatchVae),
    Beta(BetaVae),
}

/// Noise for one forward pass of either model family.
#[derive(Clone, Debug)]
pub enum ModelNoise<T> {
    Patch(PatchNoise<T>),
    /// Standard normal, `[n, z_dim]`.
    Beta(Tensor<T>),
}

impl Model {
    /// Build the architecture and initialize parameters from `seed`.
    pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build_into(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Rebuild the layer structure without keeping its fresh initialization
    /// (used before loading stored parameters).
    pub fn build_into<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Ok(match config.kind {
            ModelKind::PatchVae => Model::Patch(PatchVae::build(config, store, rng)?),
            ModelKind::BetaVae => Model::Beta(BetaVae::build(config, store, rng)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Patch(m) => &m.config,
            Model::Beta(m) => &m.config,
        }
    }

    pub fn trunk(&self) -> &LayerStack {
        match self {
            Model::Patch(m) => &m.trunk,
            Model::Beta(m) => &m.trunk,
        }
    }

    pub fn as_patch(&self) -> Option<&PatchVae> {
        match self {
            Model::Patch(m) => Some(m),
            Model::Beta(_) => None,
        }
    }

    pub fn draw_noise<T: Scalar, R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> ModelNoise<T> {
        match self {
            Model::Patch(m) => ModelNoise::Patch(PatchNoise::draw(&m.config, batch, rng)),
            Model::Beta(m) => ModelNoise::Beta(distributions::standard_normal(&[batch, m.config.z_dim], rng)),
        }
    }
}
