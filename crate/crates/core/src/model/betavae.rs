//! Global-bottleneck beta-VAE baseline sharing the trunk and decoder tail.

use rand::Rng;

use super::config::{ModelConfig, ModelKind};
use super::trunk::{build_trunk, decoder_tail_kinds, DECODER_PREFIX, LEAKY_SLOPE};
use crate::distributions::{self, GaussianParams};
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Graph, LayerKind, LayerStack, Mode, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct BetaForward {
    pub features: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub recon: Var,
}

#[derive(Clone, Debug)]
pub struct BetaVae {
    pub config: ModelConfig,
    pub trunk: LayerStack,
    pub bottleneck: LayerStack,
    pub mu_head: LayerStack,
    pub logvar_head: LayerStack,
    pub decoder: LayerStack,
}

impl BetaVae {
    pub fn build<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.kind != ModelKind::BetaVae {
            return Err(Error::Config("BetaVae::build needs kind = betavae".into()));
        }
        let trunk = build_trunk(config, store, rng)?;
        let feat = trunk.out_shape().to_vec();
        let bottleneck = LayerStack::build(
            "bottleneck",
            &feat,
            vec![
                LayerKind::Conv(ConvSpec::new(1, config.bottleneck_channels, 1, 0)),
                LayerKind::BatchNorm,
                LayerKind::Relu,
            ],
            store,
            rng,
        )?;
        let (h, _) = config.grid();
        let head = || vec![LayerKind::Conv(ConvSpec::new(h, config.z_dim, 1, 0).with_bias())];
        let mu_head = LayerStack::build("z_mu", bottleneck.out_shape(), head(), store, rng)?;
        let logvar_head = LayerStack::build("z_logvar", bottleneck.out_shape(), head(), store, rng)?;
        let mut kinds = vec![
            LayerKind::Deconv(ConvSpec::new(h, config.bottleneck_channels, 1, 0)),
            LayerKind::BatchNorm,
            LayerKind::LeakyRelu(LEAKY_SLOPE),
        ];
        kinds.extend(decoder_tail_kinds(config));
        let decoder = LayerStack::build(DECODER_PREFIX, &[1, 1, config.z_dim], kinds, store, rng)?;
        Ok(Self {
            config: config.clone(),
            trunk,
            bottleneck,
            mu_head,
            logvar_head,
            decoder,
        })
    }

    /// In train mode `z = mu + exp(logvar / 2) * noise`; in eval mode `z = mu`.
    pub fn forward_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        noise: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<BetaForward> {
        let features = self.trunk.forward(g, store, x, mode)?;
        let b = self.bottleneck.forward(g, store, features, mode)?;
        let mu = self.mu_head.forward(g, store, b, mode)?;
        let lv = self.logvar_head.forward(g, store, b, mode)?;
        let lim = T::lit(distributions::LOGVAR_LIMIT);
        let logvar = g.clamp(lv, -lim, lim);
        let z = match (mode, noise) {
            (Mode::Train, Some(n)) => {
                let n = n.clone().reshape(g.shape(mu))?;
                distributions::sample_gaussian_var(g, mu, logvar, n)?
            }
            (Mode::Train, None) => return Err(Error::Config("train-mode forward needs noise".into())),
            (Mode::Eval, _) => mu,
        };
        let recon = self.decoder.forward(g, store, z, mode)?;
        Ok(BetaForward {
            features,
            mu,
            logvar,
            z,
            recon,
        })
    }

    /// Eval-mode reconstruction and posterior, `mu`/`logvar` as `[n, z_dim]`.
    pub fn reconstruct<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, GaussianParams<T>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward_vars(&mut g, store, xv, None, Mode::Eval)?;
        let n = x.shape()[0];
        let z = self.config.z_dim;
        let params = GaussianParams::new(g.value(f.mu).clone().reshape(&[n, z])?, g.value(f.logvar).clone().reshape(&[n, z])?)?;
        Ok((g.value(f.recon).clone(), params))
    }
}
