//! The patch-structured VAE: trunk, occurrence head, pooled appearance head,
//! broadcast assembly of the patch code, and the upsampling decoder.

use rand::Rng;

use super::config::{ModelConfig, ModelKind};
use super::trunk::{build_trunk, decoder_tail_kinds, DECODER_PREFIX};
use crate::distributions::{self, PROB_EPS};
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Graph, LayerKind, LayerStack, Mode, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalizer guard of the probability-weighted appearance average.
pub const POOL_EPS: f64 = 1e-6;

/// Posterior parameters for a batch. Layouts: `occ_probs [n, h, w, N]`,
/// `app_mu` and `app_logvar` `[n, N, d_p]` (one vector per part).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPosterior<T> {
    pub occ_probs: Tensor<T>,
    pub app_mu: Tensor<T>,
    pub app_logvar: Tensor<T>,
}

/// Stochastic decoder input: `zhat [n, h, w, N * d_p]` where the channel
/// slice of part `i` at location `l` is `occ_samples[l, i] * app_samples[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLatentCode<T> {
    pub zhat: Tensor<T>,
    pub occ_samples: Tensor<T>,
    pub app_samples: Tensor<T>,
}

/// Explicit noise for one forward pass.
#[derive(Clone, Debug)]
pub struct PatchNoise<T> {
    /// Uniform (0, 1) noise, `[n, h, w, N]`.
    pub occ_uniform: Tensor<T>,
    /// Standard normal noise, `[n, N, d_p]`.
    pub app_normal: Tensor<T>,
}

impl<T: Scalar> PatchNoise<T> {
    pub fn draw<R: Rng + ?Sized>(cfg: &ModelConfig, batch: usize, rng: &mut R) -> Self {
        let (h, w) = cfg.grid();
        Self {
            occ_uniform: distributions::uniform_open(&[batch, h, w, cfg.parts], rng),
            app_normal: distributions::standard_normal(&[batch, cfg.parts, cfg.part_dim], rng),
        }
    }
}

/// Graph handles of every intermediate of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PatchForward {
    pub features: Var,
    pub occ_probs: Var,
    pub app_mu: Var,
    pub app_logvar: Var,
    pub occ_samples: Var,
    pub app_samples: Var,
    pub zhat: Var,
    pub recon: Var,
}

/// Posterior handles produced by [`PatchVae::encode_vars`].
#[derive(Clone, Copy, Debug)]
pub struct PatchEncoding {
    pub features: Var,
    pub occ_probs: Var,
    pub app_mu: Var,
    pub app_logvar: Var,
}

#[derive(Clone, Debug)]
pub struct PatchVae {
    pub config: ModelConfig,
    pub trunk: LayerStack,
    pub occ_head: LayerStack,
    pub app_mu_head: LayerStack,
    pub app_logvar_head: LayerStack,
    pub decoder: LayerStack,
}

/// Initial bias of the appearance log-variance head.
pub const APP_LOGVAR_INIT: f64 = -4.0;

/// Set every bias of a single-layer head to `value`. The occurrence head
/// starts at `logit(prior)` so every part begins at its prior.
fn fill_bias<T: Scalar>(store: &mut ParamStore<T>, head: &LayerStack, value: f64) -> Result<()> {
    let v = T::lit(value);
    store.tensor_mut(&format!("{}.bias", head.layer_prefix(0)))?.data_mut().iter_mut().for_each(|b| *b = v);
    Ok(())
}

impl PatchVae {
    pub fn build<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.kind != ModelKind::PatchVae {
            return Err(Error::Config("PatchVae::build needs kind = patchvae".into()));
        }
        let trunk = build_trunk(config, store, rng)?;
        let feat = trunk.out_shape().to_vec();
        let k = config.head_kernel;
        let head = |c: usize| vec![LayerKind::Conv(ConvSpec::new(k, c, 1, k / 2).with_bias())];
        let occ_head = LayerStack::build("occ", &feat, head(config.parts), store, rng)?;
        let p = config.prior();
        fill_bias(store, &occ_head, (p / (1.0 - p)).ln())?;
        let app_mu_head = LayerStack::build("app_mu", &feat, head(config.code_channels()), store, rng)?;
        let app_logvar_head = LayerStack::build("app_logvar", &feat, head(config.code_channels()), store, rng)?;
        fill_bias(store, &app_logvar_head, APP_LOGVAR_INIT)?;
        let (h, w) = config.grid();
        let decoder = LayerStack::build(
            DECODER_PREFIX,
            &[h, w, config.code_channels()],
            decoder_tail_kinds(config),
            store,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            trunk,
            occ_head,
            app_mu_head,
            app_logvar_head,
            decoder,
        })
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, h, w, c) = x.dims4()?;
        if (h, w, c) != (self.config.height, self.config.width, 3) {
            return Err(Error::shape(
                "model input",
                &[self.config.height, self.config.width, 3],
                &x.shape()[1..],
            ));
        }
        Ok(())
    }

    /// Trunk, occurrence probabilities, and pooled appearance parameters.
    pub fn encode_vars<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<PatchEncoding> {
        let features = self.trunk.forward(g, store, x, mode)?;
        let occ_probs = self.occurrence_vars(g, store, features, mode)?;
        let (app_mu, app_logvar) = self.appearance_vars(g, store, features, occ_probs, mode)?;
        Ok(PatchEncoding {
            features,
            occ_probs,
            app_mu,
            app_logvar,
        })
    }

    /// Single conv with sigmoid, clamped to `[eps, 1 - eps]`.
    pub fn occurrence_vars<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var, mode: Mode) -> Result<Var> {
        let logits = self.occ_head.forward(g, store, features, mode)?;
        let probs = g.sigmoid(logits);
        let eps = T::lit(PROB_EPS);
        Ok(g.clamp(probs, eps, T::one() - eps))
    }

    /// Per-location mean/log-variance maps pooled per part with occurrence
    /// probabilities as weights.
    pub fn appearance_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        occ_probs: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let n = self.config.parts;
        let eps = T::lit(POOL_EPS);
        let mu_map = self.app_mu_head.forward(g, store, features, mode)?;
        let lv_map = self.app_logvar_head.forward(g, store, features, mode)?;
        let mu = g.weighted_pool(mu_map, occ_probs, n, eps)?;
        let lv = g.weighted_pool(lv_map, occ_probs, n, eps)?;
        let lim = T::lit(distributions::LOGVAR_LIMIT);
        let lv = g.clamp(lv, -lim, lim);
        Ok((mu, lv))
    }

    /// Full forward pass. In train mode occurrences are relaxed-Bernoulli
    /// samples at temperature `tau` and appearances are reparameterized
    /// samples; in eval mode occurrences are thresholded at 0.5 and the
    /// appearance mean is used, so the output is deterministic.
    pub fn forward_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        noise: Option<&PatchNoise<T>>,
        tau: f64,
        mode: Mode,
    ) -> Result<PatchForward> {
        let enc = self.encode_vars(g, store, x, mode)?;
        let (occ_samples, app_samples) = match mode {
            Mode::Train => {
                let noise = noise.ok_or_else(|| Error::Config("train-mode forward needs noise".into()))?;
                let occ = distributions::sample_relaxed_bernoulli_var(g, enc.occ_probs, T::lit(tau), &noise.occ_uniform)?;
                let app = distributions::sample_gaussian_var(g, enc.app_mu, enc.app_logvar, noise.app_normal.clone())?;
                (occ, app)
            }
            Mode::Eval => {
                let hard = distributions::harden(g.value(enc.occ_probs), T::lit(distributions::HARDEN_THRESHOLD));
                (g.constant(hard), enc.app_mu)
            }
        };
        let zhat = g.assemble(occ_samples, app_samples)?;
        let recon = self.decoder.forward(g, store, zhat, mode)?;
        Ok(PatchForward {
            features: enc.features,
            occ_probs: enc.occ_probs,
            app_mu: enc.app_mu,
            app_logvar: enc.app_logvar,
            occ_samples,
            app_samples,
            zhat,
            recon,
        })
    }

    pub fn encode_trunk<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.trunk.forward(&mut g, store, xv, mode)?;
        Ok(g.value(f).clone())
    }

    pub fn encode_occurrence<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let q = self.occurrence_vars(&mut g, store, f, mode)?;
        Ok(g.value(q).clone())
    }

    pub fn encode_appearance<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        occ_probs: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let q = g.constant(occ_probs.clone());
        let (mu, lv) = self.appearance_vars(&mut g, store, f, q, mode)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Posterior of a batch (eval-mode callers get a deterministic result).
    pub fn posterior<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<PatchPosterior<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let enc = self.encode_vars(&mut g, store, xv, mode)?;
        Ok(PatchPosterior {
            occ_probs: g.value(enc.occ_probs).clone(),
            app_mu: g.value(enc.app_mu).clone(),
            app_logvar: g.value(enc.app_logvar).clone(),
        })
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, zhat: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = g.constant(zhat.clone());
        let y = self.decoder.forward(&mut g, store, z, mode)?;
        Ok(g.value(y).clone())
    }

    /// Eval-mode forward returning plain tensors.
    pub fn reconstruct<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, PatchPosterior<T>, PatchLatentCode<T>)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = self.forward_vars(&mut g, store, xv, None, 1.0, Mode::Eval)?;
        Ok(collect_forward(&g, &fwd))
    }
}

/// Copy the tensors behind a recorded forward pass out of the graph.
pub fn collect_forward<T: Scalar>(g: &Graph<T>, fwd: &PatchForward) -> (Tensor<T>, PatchPosterior<T>, PatchLatentCode<T>) {
    (
        g.value(fwd.recon).clone(),
        PatchPosterior {
            occ_probs: g.value(fwd.occ_probs).clone(),
            app_mu: g.value(fwd.app_mu).clone(),
            app_logvar: g.value(fwd.app_logvar).clone(),
        },
        PatchLatentCode {
            zhat: g.value(fwd.zhat).clone(),
            occ_samples: g.value(fwd.occ_samples).clone(),
            app_samples: g.value(fwd.app_samples).clone(),
        },
    )
}

/// Broadcast assembly on plain tensors: `occ [n, h, w, N]`, `app [n, N, d_p]`.
pub fn assemble<T: Scalar>(occ_samples: &Tensor<T>, app_samples: &Tensor<T>) -> Result<PatchLatentCode<T>> {
    let mut g = Graph::new();
    let o = g.constant(occ_samples.clone());
    let a = g.constant(app_samples.clone());
    let z = g.assemble(o, a)?;
    Ok(PatchLatentCode {
        zhat: g.value(z).clone(),
        occ_samples: occ_samples.clone(),
        app_samples: app_samples.clone(),
    })
}
