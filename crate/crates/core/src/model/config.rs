use crate::error::{Error, Result};

/// Spatial reduction of the feature trunk.
pub const GRID_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    PatchVae,
    BetaVae,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PatchVae => "patchvae",
            ModelKind::BetaVae => "betavae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patchvae" => Ok(ModelKind::PatchVae),
            "betavae" => Ok(ModelKind::BetaVae),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Architecture and objective hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of parts `N`.
    pub parts: usize,
    /// Appearance dimensions per part `d_p`.
    pub part_dim: usize,
    /// Trunk output channels `d_e`.
    pub feature_channels: usize,
    /// Channels of the stem conv and the first residual stage.
    pub stem_channels: usize,
    /// Residual blocks per trunk stage.
    pub blocks_per_stage: usize,
    /// Width of the first decoder layer; halved at each upsampling.
    pub decoder_channels: usize,
    /// Kernel of the occurrence and appearance heads.
    pub head_kernel: usize,
    pub height: usize,
    pub width: usize,
    /// Occurrence prior; `None` means `1 / parts`.
    pub occ_prior: Option<f64>,
    /// Weight of the appearance KL.
    pub beta_app: f64,
    /// Weight of the occurrence KL.
    pub beta_occ: f64,
    /// KL weight of the beta-VAE baseline.
    pub beta: f64,
    /// Bottleneck size of the beta-VAE baseline.
    pub z_dim: usize,
    /// Channels of the beta-VAE 1x1 reduction before its global heads.
    pub bottleneck_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::PatchVae,
            parts: 16,
            part_dim: 6,
            feature_channels: 128,
            stem_channels: 64,
            blocks_per_stage: 2,
            decoder_channels: 256,
            head_kernel: 3,
            height: 32,
            width: 32,
            occ_prior: None,
            beta_app: 0.3,
            beta_occ: 0.3,
            beta: 1.0,
            z_dim: 96,
            bottleneck_channels: 64,
        }
    }
}

impl ModelConfig {
    pub fn betavae() -> Self {
        Self {
            kind: ModelKind::BetaVae,
            ..Self::default()
        }
    }

    /// 8x8 inputs, two parts, two appearance dims, eight trunk channels.
    pub fn miniature() -> Self {
        Self {
            parts: 2,
            part_dim: 2,
            feature_channels: 8,
            stem_channels: 4,
            blocks_per_stage: 1,
            decoder_channels: 8,
            height: 8,
            width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % GRID_STRIDE != 0 || self.width % GRID_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be positive multiples of {GRID_STRIDE}",
                self.height, self.width
            )));
        }
        if self.parts == 0 || self.part_dim == 0 || self.feature_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("part and channel counts must be >= 1".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        if self.decoder_channels < 4 {
            return Err(Error::Config("decoder_channels must be >= 4".into()));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Config("head_kernel must be odd".into()));
        }
        let p = self.prior();
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!("occurrence prior must lie in (0, 1), got {p}")));
        }
        if self.beta_app < 0.0 || self.beta_occ < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("KL weights must be nonnegative".into()));
        }
        if self.kind == ModelKind::BetaVae && self.height != self.width {
            return Err(Error::Config("the beta-VAE baseline needs square inputs".into()));
        }
        Ok(())
    }

    pub fn prior(&self) -> f64 {
        self.occ_prior.unwrap_or(1.0 / self.parts as f64)
    }

    /// `(h, w)` of the latent grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / GRID_STRIDE, self.width / GRID_STRIDE)
    }

    pub fn locations(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Channels of the assembled patch code: `N * d_p`.
    pub fn code_channels(&self) -> usize {
        self.parts * self.part_dim
    }
}
