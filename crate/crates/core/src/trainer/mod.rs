//! Unsupervised training: ADAM over shuffled minibatches, per-step
//! temperature annealing, metric history and checkpoints.
//!
//! Randomness is derived from `(seed, epoch)` for shuffling and
//! `(seed, global step)` for sampling noise, so a run resumed from any
//! checkpoint replays exactly the steps an uninterrupted run would take.

pub mod adam;
pub mod checkpoint;
pub mod sweep;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};

use crate::data::{batches_per_epoch, minibatches, Dataset};
use crate::distributions::{temperature_at, TemperatureSchedule};
use crate::error::{Error, Result};
use crate::losses::{betavae_objective_vars, patchvae_objective_vars, LossBreakdown, LossVars, ReconKind};
use crate::model::{Model, ModelConfig, ModelNoise};
use crate::nn::{Graph, Mode, ParamStore, INIT_SCHEME};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HISTORY_HEADER: &str = "step,recon,kl_occ,kl_app,tau";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: TemperatureSchedule,
    pub loss: ReconKind,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop once the global step reaches this value.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: TemperatureSchedule::default(),
            loss: ReconKind::Plain,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Long-schedule settings for full CIFAR-100 training.
    pub fn cifar_full() -> Self {
        Self {
            epochs: 90,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid ADAM hyperparameters".into()));
        }
        self.schedule.validate()
    }
}

/// Losses of one optimizer step; `step` is the global step count before the
/// update and `tau = temperature_at(schedule, step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: usize,
    pub recon: f64,
    pub kl_occ: f64,
    pub kl_app: f64,
    pub total: f64,
    pub tau: f64,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub init_scheme: String,
    pub store: ParamStore<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub history: Vec<StepRecord>,
}

impl<T: Scalar> TrainState<T> {
    /// Freshly initialized model and optimizer state.
    pub fn fresh(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<(Model, Self)> {
        let (model, store) = Model::build(model_config, train_config.seed)?;
        Ok((
            model,
            Self {
                model_config: model_config.clone(),
                train_config: train_config.clone(),
                init_scheme: INIT_SCHEME.to_string(),
                store,
                adam: AdamState::new(),
                step: 0,
                history: Vec::new(),
            },
        ))
    }

    /// Rebuild the layer structure and check the stored arrays against it.
    pub fn model(&self) -> Result<Model> {
        let mut scratch = ParamStore::<T>::new();
        let model = Model::build_into(&self.model_config, &mut scratch, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, e) in scratch.iter() {
            let stored = self.store.tensor(name)?;
            if stored.shape() != e.value.shape() {
                return Err(Error::shape(name, e.value.shape(), stored.shape()));
            }
        }
        Ok(model)
    }

    pub fn epoch_summaries(&self) -> Vec<EpochSummary> {
        epoch_summaries(&self.history, &self.model_config)
    }
}

/// Mean losses of an epoch, weighted equally per step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
}

pub fn epoch_summaries(history: &[StepRecord], cfg: &ModelConfig) -> Vec<EpochSummary> {
    let (wo, wa) = match cfg.kind {
        crate::model::ModelKind::PatchVae => (cfg.beta_occ, cfg.beta_app),
        crate::model::ModelKind::BetaVae => (0.0, cfg.beta),
    };
    let mut out: Vec<EpochSummary> = Vec::new();
    for r in history {
        if out.last().is_none_or(|s| s.epoch != r.epoch) {
            out.push(EpochSummary {
                epoch: r.epoch,
                steps: 0,
                loss: LossBreakdown::combine(0.0, 0.0, 0.0, wo, wa),
            });
        }
        let s = out.last_mut().unwrap();
        s.steps += 1;
        s.loss.recon += r.recon;
        s.loss.kl_occ += r.kl_occ;
        s.loss.kl_app += r.kl_app;
        s.loss.total += r.total;
    }
    for s in &mut out {
        let n = s.steps as f64;
        s.loss.recon /= n;
        s.loss.kl_occ /= n;
        s.loss.kl_app /= n;
        s.loss.total /= n;
    }
    out
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)) ^ index)
}

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

pub fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, SHUFFLE_STREAM, epoch as u64)
}

pub fn noise_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, NOISE_STREAM, step))
}

/// Forward pass and objective of either model family on one batch.
#[allow(clippy::too_many_arguments)]
pub fn objective_vars<T: Scalar>(
    model: &Model,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    noise: Option<&ModelNoise<T>>,
    tau: f64,
    mode: Mode,
    kind: ReconKind,
) -> Result<LossVars> {
    let xv = g.constant(x.clone());
    match model {
        Model::Patch(m) => {
            let noise = match noise {
                Some(ModelNoise::Patch(n)) => Some(n),
                Some(ModelNoise::Beta(_)) => return Err(Error::Config("beta-VAE noise given to PatchVAE".into())),
                None => None,
            };
            let f = m.forward_vars(g, store, xv, noise, tau, mode)?;
            patchvae_objective_vars(g, xv, &f, &m.config, kind)
        }
        Model::Beta(m) => {
            let noise = match noise {
                Some(ModelNoise::Beta(n)) => Some(n),
                Some(ModelNoise::Patch(_)) => return Err(Error::Config("PatchVAE noise given to beta-VAE".into())),
                None => None,
            };
            let f = m.forward_vars(g, store, xv, noise, mode)?;
            betavae_objective_vars(g, xv, &f, m.config.beta, kind)
        }
    }
}

/// Train until `cfg.epochs` (or `cfg.max_steps`) starting from `state.step`.
/// With `out_dir`, checkpoints and the history CSV are written there, and a
/// non-finite loss leaves `diagnostic.pvae` behind.
pub fn train<T: Scalar>(
    model: &Model,
    state: &mut TrainState<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    let mc = model.config();
    if (dataset.height, dataset.width) != (mc.height, mc.width) {
        return Err(Error::shape("dataset resolution", &[mc.height, mc.width], &[dataset.height, dataset.width]));
    }
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    state.train_config = cfg.clone();
    let hyper = cfg.adam();
    let per_epoch = batches_per_epoch(dataset.len(), cfg.batch_size) as u64;
    let start_epoch = (state.step / per_epoch) as usize;
    'epochs: for epoch in start_epoch..cfg.epochs {
        let batches = minibatches(dataset.len(), cfg.batch_size, Some(shuffle_seed(cfg.seed, epoch)))?;
        let skip = (state.step - epoch as u64 * per_epoch) as usize;
        for (b, idx) in batches.iter().enumerate().skip(skip) {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                break 'epochs;
            }
            let step = state.step;
            let tau = temperature_at(&cfg.schedule, step);
            let x = dataset.images::<T>(idx);
            let noise = model.draw_noise::<T, _>(idx.len(), &mut noise_rng(cfg.seed, step));
            let mut g = Graph::new();
            let loss = objective_vars(model, &mut g, &state.store, &x, Some(&noise), tau, Mode::Train, cfg.loss)?;
            let br = loss.breakdown(&g);
            if !br.is_finite() {
                let mut msg = format!("epoch {epoch}, batch {b} (global step {step}): {br:?}");
                if let Some(dir) = out_dir {
                    let path = dir.join("diagnostic.pvae");
                    save_checkpoint(state, &path)?;
                    write!(msg, "; diagnostic checkpoint written to {}", path.display()).unwrap();
                }
                return Err(Error::NonFinite(msg));
            }
            let grads = g.backward(loss.total)?.param_grads();
            state.store.apply_updates(g.take_stat_updates())?;
            state.adam.update(&hyper, &mut state.store, &grads)?;
            state.history.push(StepRecord {
                step,
                epoch,
                batch: b,
                recon: br.recon,
                kl_occ: br.kl_occ,
                kl_app: br.kl_app,
                total: br.total,
                tau,
            });
            state.step += 1;
        }
        if let Some(s) = state.epoch_summaries().last().filter(|s| s.epoch == epoch) {
            log::info!(
                "epoch {} recon {:.5} kl_occ {:.5} kl_app {:.5} total {:.5}",
                epoch + 1,
                s.loss.recon,
                s.loss.kl_occ,
                s.loss.kl_app,
                s.loss.total
            );
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(state, &dir.join(format!("checkpoint_epoch{}.pvae", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, &dir.join("checkpoint.pvae"))?;
        write_history_csv(&state.history, &dir.join("history.csv"))?;
    }
    Ok(state.epoch_summaries())
}

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        writeln!(s, "{},{},{},{},{}", r.step, r.recon, r.kl_occ, r.kl_app, r.tau).unwrap();
    }
    s
}

pub fn write_history_csv(history: &[StepRecord], path: &Path) -> Result<()> {
    fs::write(path, history_csv(history))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_stream_and_index() {
        let a = derive_seed(1, 1, 0);
        assert_ne!(a, derive_seed(1, 2, 0));
        assert_ne!(a, derive_seed(1, 1, 1));
        assert_ne!(a, derive_seed(2, 1, 0));
        assert_eq!(a, derive_seed(1, 1, 0));
    }

    #[test]
    fn summaries_average_per_epoch() {
        let rec = |step, epoch, total| StepRecord {
            step,
            epoch,
            batch: 0,
            recon: total,
            kl_occ: 0.0,
            kl_app: 0.0,
            total,
            tau: 1.0,
        };
        let s = epoch_summaries(&[rec(0, 0, 1.0), rec(1, 0, 3.0), rec(2, 1, 5.0)], &ModelConfig::default());
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].steps, s[0].loss.total), (2, 2.0));
        assert_eq!(s[1].loss.total, 5.0);
    }

    #[test]
    fn history_csv_has_documented_header() {
        let csv = history_csv(&[]);
        assert_eq!(csv, "step,recon,kl_occ,kl_app,tau\n");
    }
}
