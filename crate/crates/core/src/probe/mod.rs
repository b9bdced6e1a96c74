//! Downstream evaluation: a two-layer classifier on top of the (partially)
//! frozen trunk, trained with SGD + momentum, plus reconstruction metrics.

pub mod metrics;

use std::fmt::Write as _;
use std::ops::Range;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use metrics::{mean_psnr, psnr, ssim, PSNR_CAP_DB};

use crate::config::to_lines;
use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::model::trunk::{build_trunk, TrunkLayout};
use crate::model::ModelConfig;
use crate::nn::{Graph, LayerKind, LayerStack, Mode, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::derive_seed;

pub const HEAD_PREFIX: &str = "head";
const PROBE_SHUFFLE_STREAM: u64 = 3;

/// How much of the trunk stays fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeLevel {
    /// Stem conv group.
    Conv1,
    /// Stem and first residual stage.
    Conv1_3,
    /// Whole trunk.
    Conv1_5,
}

impl FreezeLevel {
    pub fn name(self) -> &'static str {
        match self {
            FreezeLevel::Conv1 => "conv1",
            FreezeLevel::Conv1_3 => "conv1_3",
            FreezeLevel::Conv1_5 => "conv1_5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv1" => Ok(FreezeLevel::Conv1),
            "conv1_3" => Ok(FreezeLevel::Conv1_3),
            "conv1_5" => Ok(FreezeLevel::Conv1_5),
            _ => Err(Error::Config(format!("unknown freeze level {s:?} (conv1, conv1_3, conv1_5)"))),
        }
    }

    /// Trunk layer indices held fixed.
    pub fn frozen_layers(self, layout: &TrunkLayout) -> Range<usize> {
        match self {
            FreezeLevel::Conv1 => 0..layout.stem.end,
            FreezeLevel::Conv1_3 => 0..layout.stage1.end,
            FreezeLevel::Conv1_5 => 0..layout.stage2.end,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub freeze_level: FreezeLevel,
    pub hidden: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            freeze_level: FreezeLevel::Conv1_5,
            hidden: 512,
            num_classes: 100,
            lr: 1e-2,
            momentum: 0.9,
            decay_every: 30,
            decay_factor: 0.1,
            epochs: 30,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_classes < 2 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("probe needs hidden >= 1, num_classes >= 2, batch_size >= 1, decay_every >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("invalid SGD hyperparameters".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Trunk plus `FC(hidden) -> ReLU -> FC(num_classes)`.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub trunk: LayerStack,
    pub head: LayerStack,
    pub frozen: Range<usize>,
    pub config: ProbeConfig,
}

/// Build the classifier. Trunk entries are copied from `pretrained` when
/// given (e.g. a checkpoint's store); otherwise the trunk keeps its random
/// initialization from `probe.seed`.
pub fn build_classifier<T: Scalar>(
    model: &ModelConfig,
    pretrained: Option<&ParamStore<T>>,
    probe: &ProbeConfig,
    height: usize,
    width: usize,
) -> Result<(Classifier, ParamStore<T>)> {
    probe.validate()?;
    if (height, width) != (model.height, model.width) {
        return Err(Error::Config(format!(
            "checkpoint resolution {}x{} does not match probe data {height}x{width}",
            model.height, model.width
        )));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let trunk = build_trunk(model, &mut store, &mut rng)?;
    if let Some(src) = pretrained {
        let copied = store.load_matching(src)?;
        if copied != store.len() {
            return Err(Error::Config(format!(
                "pretrained parameters cover {copied} of {} trunk entries",
                store.len()
            )));
        }
    }
    let head = LayerStack::build(
        HEAD_PREFIX,
        trunk.out_shape(),
        vec![
            LayerKind::FullyConnected { units: probe.hidden },
            LayerKind::Relu,
            LayerKind::FullyConnected {
                units: probe.num_classes,
            },
        ],
        &mut store,
        &mut rng,
    )?;
    let frozen = probe.freeze_level.frozen_layers(&TrunkLayout::new(model));
    for i in frozen.clone() {
        store.set_frozen(&trunk.layer_prefix(i), true);
    }
    Ok((
        Classifier {
            trunk,
            head,
            frozen,
            config: probe.clone(),
        },
        store,
    ))
}

impl Classifier {
    /// Output of the frozen layers (always eval mode).
    pub fn frozen_features<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.trunk.forward_range(&mut g, store, xv, self.frozen.clone(), Mode::Eval)?;
        Ok(g.value(f).clone())
    }

    /// Logits from frozen-layer features.
    pub fn logits_from_features<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feats: Var, mode: Mode) -> Result<Var> {
        let rest = self.frozen.end..self.trunk.layers.len();
        let f = self.trunk.forward_range(g, store, feats, rest, mode)?;
        self.head.forward(g, store, f, mode)
    }

    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let feats = self.frozen_features(store, x)?;
        let mut g = Graph::new();
        let fv = g.constant(feats);
        let l = self.logits_from_features(&mut g, store, fv, Mode::Eval)?;
        Ok(g.value(l).clone())
    }
}

/// Held-out accuracy summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
    /// `(class name, examples, top-1 percent)`.
    pub per_class: Vec<(String, usize, f64)>,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub config: String,
}

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        format!("top1,top5,count\n{},{},{}\n", self.top1, self.top5, self.count)
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,name,count,top1\n");
        for (i, (name, n, acc)) in self.per_class.iter().enumerate() {
            writeln!(s, "{i},{name},{n},{acc}").unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "top-1 accuracy: {:.2}%", self.top1).unwrap();
        writeln!(s, "top-5 accuracy: {:.2}%", self.top5).unwrap();
        writeln!(s, "evaluated images: {}", self.count).unwrap();
        if let Some(last) = self.train_loss.last() {
            writeln!(s, "final training loss: {last:.5}").unwrap();
        }
        writeln!(s, "\nconfiguration:").unwrap();
        for line in self.config.lines() {
            writeln!(s, "  {line}").unwrap();
        }
        s
    }
}

fn check_dataset(c: &Classifier, ds: &Dataset) -> Result<()> {
    let [h, w, _] = c.trunk.in_shape() else {
        return Err(Error::Config("trunk has no input shape".into()));
    };
    if (ds.height, ds.width) != (*h, *w) {
        return Err(Error::Config(format!(
            "checkpoint resolution {h}x{w} does not match probe data {}x{}",
            ds.height, ds.width
        )));
    }
    if ds.num_classes > c.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the probe head has {}",
            ds.num_classes, c.config.num_classes
        )));
    }
    Ok(())
}

fn features_in_batches<T: Scalar>(c: &Classifier, store: &ParamStore<T>, ds: &Dataset, batch: usize) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    for idx in minibatches(ds.len(), batch, None)? {
        parts.push(c.frozen_features(store, &ds.images::<T>(&idx))?);
    }
    Tensor::concat_outer(&parts)
}

pub fn evaluate<T: Scalar>(c: &Classifier, store: &ParamStore<T>, ds: &Dataset) -> Result<EvalReport> {
    check_dataset(c, ds)?;
    let classes = c.config.num_classes;
    let k = 5.min(classes);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let mut per_hits = vec![0usize; ds.num_classes];
    for idx in minibatches(ds.len(), c.config.batch_size, None)? {
        let logits = c.logits(store, &ds.images::<T>(&idx))?;
        for (row, &i) in logits.data().chunks_exact(classes).zip(&idx) {
            let label = ds.labels[i];
            let mut order: Vec<usize> = (0..classes).collect();
            // Ties resolve to the lower class index.
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            if order[0] == label {
                hit1 += 1;
                per_hits[label] += 1;
            }
            if order[..k].contains(&label) {
                hit5 += 1;
            }
        }
    }
    let n = ds.len().max(1) as f64;
    let hist = ds.label_histogram();
    Ok(EvalReport {
        top1: 100.0 * hit1 as f64 / n,
        top5: 100.0 * hit5 as f64 / n,
        count: ds.len(),
        per_class: (0..ds.num_classes)
            .map(|cl| {
                let acc = if hist[cl] == 0 { 0.0 } else { 100.0 * per_hits[cl] as f64 / hist[cl] as f64 };
                (ds.class_names[cl].clone(), hist[cl], acc)
            })
            .collect(),
        train_loss: Vec::new(),
        config: to_lines(&c.config),
    })
}

/// Train the non-frozen part with SGD + momentum (`v = m v + g`,
/// `p -= lr v`) and cross-entropy, then evaluate on `test`. Frozen-layer
/// outputs are computed once up front.
pub fn train_probe<T: Scalar>(c: &Classifier, store: &mut ParamStore<T>, train: &Dataset, test: &Dataset) -> Result<EvalReport> {
    check_dataset(c, train)?;
    let cfg = &c.config;
    let feats = features_in_batches(c, store, train, cfg.batch_size)?;
    let mut velocity: IndexMap<String, Tensor<T>> = IndexMap::new();
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = T::lit(cfg.lr_at(epoch));
        let mu = T::lit(cfg.momentum);
        let mut sum = 0.0;
        let batches = minibatches(train.len(), cfg.batch_size, Some(derive_seed(cfg.seed, PROBE_SHUFFLE_STREAM, epoch as u64)))?;
        for (b, idx) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let fv = g.constant(feats.gather_outer(idx));
            let logits = c.logits_from_features(&mut g, store, fv, Mode::Train)?;
            let loss = g.cross_entropy(logits, &train.labels_of(idx))?;
            let lv = g.scalar_value(loss).as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("probe epoch {epoch}, batch {b}: loss {lv}")));
            }
            sum += lv;
            let grads = g.backward(loss)?.param_grads();
            store.apply_updates(g.take_stat_updates())?;
            for (name, grad) in grads {
                let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
                let p = store.tensor_mut(&name)?;
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *vv = mu * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
        }
        train_loss.push(sum / batches.len() as f64);
        log::info!("probe epoch {} loss {:.5}", epoch + 1, sum / batches.len() as f64);
    }
    let mut report = evaluate(c, store, test)?;
    report.train_loss = train_loss;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let p = ProbeConfig::default();
        assert_eq!(p.lr_at(0), 1e-2);
        assert_eq!(p.lr_at(29), 1e-2);
        assert!((p.lr_at(30) - 1e-3).abs() < 1e-15);
        assert!((p.lr_at(65) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn freeze_levels_map_to_trunk_groups() {
        let layout = TrunkLayout::new(&ModelConfig::default());
        assert_eq!(FreezeLevel::Conv1.frozen_layers(&layout), 0..4);
        assert_eq!(FreezeLevel::Conv1_3.frozen_layers(&layout), 0..6);
        assert_eq!(FreezeLevel::Conv1_5.frozen_layers(&layout), 0..8);
    }
}
