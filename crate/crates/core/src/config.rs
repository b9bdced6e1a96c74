//! Flat `key = value` configuration. Keys are dotted by section
//! (`model.parts`, `train.lr`, ...); unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_cifar_binary, load_image_folder, make_synthetic_split, Dataset, Split, SynthData, SynthSpec};
use crate::distributions::{ScheduleForm, TemperatureSchedule};
use crate::error::{Error, Result};
use crate::losses::ReconKind;
use crate::model::{ModelConfig, ModelKind};
use crate::probe::{FreezeLevel, ProbeConfig};
use crate::trainer::TrainConfig;

/// A struct addressable by flat keys.
pub trait Settings {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn entries(&self) -> Vec<(&'static str, String)>;
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn unknown(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key {section}.{key}"))
}

impl Settings for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "kind" => self.kind = ModelKind::parse(v.trim())?,
            "parts" => self.parts = parse_value(key, v)?,
            "part_dim" => self.part_dim = parse_value(key, v)?,
            "feature_channels" => self.feature_channels = parse_value(key, v)?,
            "stem_channels" => self.stem_channels = parse_value(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_value(key, v)?,
            "decoder_channels" => self.decoder_channels = parse_value(key, v)?,
            "head_kernel" => self.head_kernel = parse_value(key, v)?,
            "height" => self.height = parse_value(key, v)?,
            "width" => self.width = parse_value(key, v)?,
            "occ_prior" => {
                self.occ_prior = match v.trim() {
                    "auto" => None,
                    s => Some(parse_value(key, s)?),
                }
            }
            "beta_app" => self.beta_app = parse_value(key, v)?,
            "beta_occ" => self.beta_occ = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "z_dim" => self.z_dim = parse_value(key, v)?,
            "bottleneck_channels" => self.bottleneck_channels = parse_value(key, v)?,
            _ => return Err(unknown("model", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kind", self.kind.name().to_string()),
            ("parts", self.parts.to_string()),
            ("part_dim", self.part_dim.to_string()),
            ("feature_channels", self.feature_channels.to_string()),
            ("stem_channels", self.stem_channels.to_string()),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("decoder_channels", self.decoder_channels.to_string()),
            ("head_kernel", self.head_kernel.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("occ_prior", self.occ_prior.map_or("auto".to_string(), |p| p.to_string())),
            ("beta_app", self.beta_app.to_string()),
            ("beta_occ", self.beta_occ.to_string()),
            ("beta", self.beta.to_string()),
            ("z_dim", self.z_dim.to_string()),
            ("bottleneck_channels", self.bottleneck_channels.to_string()),
        ]
    }
}

fn schedule_set(s: &mut TemperatureSchedule, key: &str, v: &str) -> Result<bool> {
    match key {
        "tau0" => s.tau0 = parse_value(key, v)?,
        "tau_rate" => s.rate = parse_value(key, v)?,
        "tau_min" => s.tau_min = parse_value(key, v)?,
        "tau_form" => {
            s.form = match v.trim() {
                "exponential" => ScheduleForm::Exponential,
                "linear" => ScheduleForm::Linear,
                _ => return Err(Error::Config(format!("unknown schedule form {v:?}"))),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

impl Settings for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if schedule_set(&mut self.schedule, key, v)? {
            return Ok(());
        }
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "loss" => self.loss = ReconKind::parse(v.trim())?,
            "seed" => self.seed = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "max_steps" => {
                self.max_steps = match v.trim() {
                    "none" => None,
                    s => Some(parse_value(key, s)?),
                }
            }
            _ => return Err(unknown("train", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("tau0", self.schedule.tau0.to_string()),
            ("tau_rate", self.schedule.rate.to_string()),
            ("tau_min", self.schedule.tau_min.to_string()),
            (
                "tau_form",
                match self.schedule.form {
                    ScheduleForm::Exponential => "exponential",
                    ScheduleForm::Linear => "linear",
                }
                .to_string(),
            ),
            ("loss", self.loss.name().to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("max_steps", self.max_steps.map_or("none".to_string(), |s| s.to_string())),
        ]
    }
}

impl Settings for ProbeConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "freeze_level" => self.freeze_level = FreezeLevel::parse(v.trim())?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "decay_every" => self.decay_every = parse_value(key, v)?,
            "decay_factor" => self.decay_factor = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(unknown("probe", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("freeze_level", self.freeze_level.name().to_string()),
            ("hidden", self.hidden.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl Settings for SynthSpec {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "count" => self.count = parse_value(key, v)?,
            "canvas" => self.canvas = parse_value(key, v)?,
            "motif_count" => self.motif_count = parse_value(key, v)?,
            "motif_size" => self.motif_size = parse_value(key, v)?,
            "motifs_per_image" => self.motifs_per_image = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Err(unknown("synth", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("count", self.count.to_string()),
            ("canvas", self.canvas.to_string()),
            ("motif_count", self.motif_count.to_string()),
            ("motif_size", self.motif_size.to_string()),
            ("motifs_per_image", self.motifs_per_image.to_string()),
            ("noise", self.noise.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum DataSource {
    /// Generated from the `synth.*` settings.
    #[default]
    Synthetic,
    /// A synthetic container written by `make-synth`.
    SynthFile(PathBuf),
    Cifar(PathBuf),
    Folder(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Keep the first K records of every class.
    pub limit: Option<usize>,
    /// Side length for image folders.
    pub size: u32,
}

impl Settings for DataConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "source" => {
                self.source = match v.split_once(':') {
                    None if v == "synthetic" => DataSource::Synthetic,
                    Some(("synth", p)) => DataSource::SynthFile(p.into()),
                    Some(("cifar", p)) => DataSource::Cifar(p.into()),
                    Some(("folder", p)) => DataSource::Folder(p.into()),
                    _ => {
                        return Err(Error::Config(format!(
                            "data.source must be synthetic, synth:<file>, cifar:<dir> or folder:<dir>, got {v:?}"
                        )))
                    }
                }
            }
            "limit" => {
                self.limit = match v {
                    "none" => None,
                    s => Some(parse_value(key, s)?),
                }
            }
            "size" => self.size = parse_value(key, v)?,
            _ => return Err(unknown("data", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let source = match &self.source {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::SynthFile(p) => format!("synth:{}", p.display()),
            DataSource::Cifar(p) => format!("cifar:{}", p.display()),
            DataSource::Folder(p) => format!("folder:{}", p.display()),
        };
        vec![
            ("source", source),
            ("limit", self.limit.map_or("none".to_string(), |l| l.to_string())),
            ("size", self.size.to_string()),
        ]
    }
}

/// A loaded dataset, with ground-truth occupancy when it is synthetic.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub synth: Option<SynthData>,
}

impl DataConfig {
    /// Load the configured source. Synthetic splits share one motif bank.
    pub fn load(&self, synth: &SynthSpec, split: Split) -> Result<LoadedData> {
        let (mut dataset, mut synth) = match &self.source {
            DataSource::Synthetic => {
                let s = make_synthetic_split(synth, split)?;
                (s.dataset.clone(), Some(s))
            }
            DataSource::SynthFile(p) => {
                let s = SynthData::load(p)?;
                (s.dataset.clone(), Some(s))
            }
            DataSource::Cifar(p) => (load_cifar_binary(p, split)?, None),
            DataSource::Folder(p) => (load_image_folder(p, self.size, split)?.dataset, None),
        };
        if let Some(k) = self.limit {
            dataset = dataset.limit_per_class(k);
            // Occupancy no longer lines up with a class-limited subset.
            synth = None;
        }
        Ok(LoadedData { dataset, synth })
    }
}

/// Every section a run can configure.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub test_data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            synth: SynthSpec::default(),
            data: DataConfig {
                size: 32,
                ..DataConfig::default()
            },
            test_data: DataConfig {
                size: 32,
                ..DataConfig::default()
            },
        }
    }
}

impl RunConfig {
    /// Apply one dotted `section.key = value` assignment.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {dotted:?} needs a section prefix")))?;
        match section {
            "model" => self.model.set(key, value),
            "train" => self.train.set(key, value),
            "probe" => self.probe.set(key, value),
            "synth" => self.synth.set(key, value),
            "data" => self.data.set(key, value),
            "test_data" => self.test_data.set(key, value),
            _ => Err(Error::Config(format!("unknown section {section:?} in {dotted:?}"))),
        }
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} must be key=value")))?;
        self.set(k, v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Fully resolved configuration in the input format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let sections: [(&str, Vec<(&'static str, String)>); 6] = [
            ("model", self.model.entries()),
            ("train", self.train.entries()),
            ("probe", self.probe.entries()),
            ("synth", self.synth.entries()),
            ("data", self.data.entries()),
            ("test_data", self.test_data.entries()),
        ];
        for (section, entries) in sections {
            for (k, v) in entries {
                writeln!(out, "{section}.{k} = {v}").unwrap();
            }
        }
        out
    }
}

/// Encode a [`Settings`] value as `key=value` lines.
pub fn to_lines<S: Settings>(s: &S) -> String {
    s.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Decode `key=value` lines onto `base`.
pub fn from_lines<S: Settings>(mut base: S, text: &str) -> Result<S> {
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
        base.set(k.trim(), v)?;
    }
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("model.parts = 8\ntrain.lr = 0.00025 # comment\nmodel.occ_prior = 0.05\ndata.source = cifar:/tmp/c\n")
            .unwrap();
        assert_eq!(cfg.model.parts, 8);
        assert_eq!(cfg.model.occ_prior, Some(0.05));
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("model.partz=3").unwrap_err().to_string().contains("model.partz"));
        assert!(cfg.apply_override("nosection=3").is_err());
        assert!(cfg.apply_text("model.parts = x").unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn model_lines_roundtrip() {
        let m = ModelConfig {
            beta_occ: 0.06,
            occ_prior: Some(0.01),
            ..ModelConfig::betavae()
        };
        assert_eq!(from_lines(ModelConfig::default(), &to_lines(&m)).unwrap(), m);
    }
}
