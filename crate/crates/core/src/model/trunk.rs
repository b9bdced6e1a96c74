//! Feature trunk and decoder stacks shared by both model families.

use std::ops::Range;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{ConvSpec, LayerKind, LayerStack, ParamStore};
use crate::scalar::Scalar;

pub const TRUNK_PREFIX: &str = "trunk";
pub const DECODER_PREFIX: &str = "decoder";
pub const LEAKY_SLOPE: f64 = 0.2;

/// Stem conv + BN + ReLU + max-pool, then two residual stages. The second
/// stage widens to `d_e` and halves the resolution at the exit of its first
/// block, for an overall reduction of 8.
pub fn trunk_kinds(cfg: &ModelConfig) -> Vec<LayerKind> {
    let mut kinds = vec![
        LayerKind::Conv(ConvSpec::new(7, cfg.stem_channels, 2, 3)),
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::MaxPool {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ];
    for _ in 0..cfg.blocks_per_stage {
        kinds.push(LayerKind::Residual {
            channels: cfg.stem_channels,
            stride: 1,
        });
    }
    for b in 0..cfg.blocks_per_stage {
        kinds.push(LayerKind::Residual {
            channels: cfg.feature_channels,
            stride: if b == 0 { 2 } else { 1 },
        });
    }
    kinds
}

/// Layer index ranges of the trunk's freezable groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrunkLayout {
    /// Stem conv group ("Conv1").
    pub stem: Range<usize>,
    /// First residual stage ("Conv2-3").
    pub stage1: Range<usize>,
    /// Second residual stage ("Conv4-5").
    pub stage2: Range<usize>,
}

impl TrunkLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let b = cfg.blocks_per_stage;
        Self {
            stem: 0..4,
            stage1: 4..4 + b,
            stage2: 4 + b..4 + 2 * b,
        }
    }

    pub fn len(&self) -> usize {
        self.stage2.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_trunk<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<LayerStack> {
    cfg.validate()?;
    LayerStack::build(TRUNK_PREFIX, &[cfg.height, cfg.width, 3], trunk_kinds(cfg), store, rng)
}

/// Upsampling pyramid: 1x1 projection, then three stride-2 deconvs halving
/// the channel count, ending in 3 channels and tanh.
pub fn decoder_tail_kinds(cfg: &ModelConfig) -> Vec<LayerKind> {
    let d = cfg.decoder_channels;
    let lrelu = LayerKind::LeakyRelu(LEAKY_SLOPE);
    vec![
        LayerKind::Deconv(ConvSpec::new(1, d, 1, 0)),
        LayerKind::BatchNorm,
        lrelu.clone(),
        LayerKind::Deconv(ConvSpec::new(4, d / 2, 2, 1)),
        LayerKind::BatchNorm,
        lrelu.clone(),
        LayerKind::Deconv(ConvSpec::new(4, d / 4, 2, 1)),
        LayerKind::BatchNorm,
        lrelu,
        LayerKind::Deconv(ConvSpec::new(4, 3, 2, 1)),
        LayerKind::Tanh,
    ]
}
