use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use patchvae::certify::certification_suite;
use patchvae::config::{LoadedData, RunConfig};
use patchvae::data::{make_synthetic, Split};
use patchvae::model::{Model, ModelKind, PatchVae};
use patchvae::nn::GradCheckConfig;
use patchvae::probe::{build_classifier, mean_psnr, ssim, train_probe};
use patchvae::trainer::sweep::{ablation_cells, run_sweep, SWEEP_HEADER};
use patchvae::trainer::{load_checkpoint, train, TrainState};
use patchvae::viz::{self, crop_mosaic, emit_plots, part_discovery, top_crops_from_occurrences, RgbImage, CROP_SIZE};
use patchvae::{ParamStore32, Tensor, Tensor32};

#[derive(Parser)]
#[command(name = "pvae", version, about = "Train, probe and inspect patch-structured VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value file; sections model., train., probe., synth., data., test_data.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set train.epochs=2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a PatchVAE or beta-VAE on data.source.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a classifier head on a frozen trunk and evaluate it.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Pretrained trunk; omitted means a randomly initialized trunk.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Occurrence heatmaps, one row per part.
    VizParts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images (columns).
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Comma-separated part indices; all parts when omitted.
        #[arg(long, value_delimiter = ',')]
        parts: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Highest-scoring crops per part.
    Crops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only this part; all parts when omitted.
        #[arg(long)]
        part: Option<usize>,
        #[arg(long, default_value_t = 50)]
        k: usize,
        /// Crop side in pixels.
        #[arg(long, default_value_t = CROP_SIZE)]
        size: usize,
    },
    /// Decode a target image with one part's appearance taken from a source image.
    Swap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        source_part: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        target_part: usize,
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// PSNR and SSIM of eval-mode reconstructions of test_data.
    ReconMetrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference certification of every layer kind and both objectives.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic motif dataset described by synth.*.
    MakeSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Images next to their Laplacian weight masks.
    Masks {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Ablation over parts, part_dim, occ_prior and beta_occ; one CSV row per cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Crops scored per cell.
        #[arg(long, default_value_t = 50)]
        k: usize,
    },
    /// Loss and temperature curves from a history CSV.
    Plots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        history: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Probe { common, .. }
            | Command::VizParts { common, .. }
            | Command::Crops { common, .. }
            | Command::Swap { common, .. }
            | Command::ReconMetrics { common, .. }
            | Command::Gradcheck { common }
            | Command::MakeSynth { common }
            | Command::Masks { common, .. }
            | Command::Sweep { common, .. }
            | Command::Plots { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    write(&out.join("config.resolved.txt"), cfg.to_text())
}

/// Checkpoint state and the PatchVAE it holds; the run config adopts the
/// checkpoint's model settings.
fn load_patch(cfg: &mut RunConfig, path: &Path) -> Result<(Model, TrainState<f32>)> {
    let state = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let model = state.model()?;
    if model.as_patch().is_none() {
        bail!("{} holds a beta-VAE; this command needs a PatchVAE", path.display());
    }
    cfg.model = state.model_config.clone();
    Ok((model, state))
}

fn patch(model: &Model) -> &PatchVae {
    model.as_patch().expect("checked at load")
}

fn first_images(data: &LoadedData, count: usize) -> Tensor32 {
    let idx: Vec<usize> = (0..count.min(data.dataset.len())).collect();
    data.dataset.images(&idx)
}

fn run(cmd: Command) -> Result<()> {
    let common = cmd.common().clone();
    let mut cfg = resolve(&common)?;
    let out = common.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cmd {
        Command::Train { resume, .. } => {
            let data = cfg.data.load(&cfg.synth, Split::Train)?;
            let (model, mut state) = match resume {
                Some(p) => {
                    let state = load_checkpoint::<f32>(&p).with_context(|| format!("loading {}", p.display()))?;
                    cfg.model = state.model_config.clone();
                    (state.model()?, state)
                }
                None => TrainState::fresh(&cfg.model, &cfg.train)?,
            };
            snapshot(&cfg, out)?;
            let summaries = train(&model, &mut state, &data.dataset, &cfg.train, Some(out))?;
            let mut csv = String::from("epoch,steps,recon,kl_occ,kl_app,total\n");
            for s in &summaries {
                csv += &format!(
                    "{},{},{},{},{},{}\n",
                    s.epoch + 1,
                    s.steps,
                    s.loss.recon,
                    s.loss.kl_occ,
                    s.loss.kl_app,
                    s.loss.total
                );
            }
            write(&out.join("epochs.csv"), csv)?;
            if !state.history.is_empty() {
                emit_plots(&out.join("history.csv"), out)?;
            }
        }
        Command::Probe { checkpoint, .. } => {
            let train_data = cfg.data.load(&cfg.synth, Split::Train)?.dataset;
            let test_data = cfg.test_data.load(&cfg.synth, Split::Test)?.dataset;
            let pretrained = match &checkpoint {
                Some(p) => {
                    let state = load_checkpoint::<f32>(p).with_context(|| format!("loading {}", p.display()))?;
                    cfg.model = state.model_config.clone();
                    Some(state.store)
                }
                None => None,
            };
            if cfg.probe.num_classes != train_data.num_classes {
                log::warn!("probe.num_classes {} adjusted to the {} classes of the data", cfg.probe.num_classes, train_data.num_classes);
                cfg.probe.num_classes = train_data.num_classes;
            }
            snapshot(&cfg, out)?;
            let (classifier, mut store) = build_classifier::<f32>(&cfg.model, pretrained.as_ref(), &cfg.probe, train_data.height, train_data.width)?;
            let report = train_probe(&classifier, &mut store, &train_data, &test_data)?;
            println!("top-1 {:.2}%  top-5 {:.2}%  ({} test images)", report.top1, report.top5, report.count);
            write(&out.join("probe_summary.csv"), report.summary_csv())?;
            write(&out.join("probe_per_class.csv"), report.per_class_csv())?;
            write(&out.join("probe_report.txt"), report.to_text())?;
        }
        Command::VizParts {
            checkpoint,
            count,
            parts,
            scale,
            ..
        } => {
            let (model, state) = load_patch(&mut cfg, &checkpoint)?;
            snapshot(&cfg, out)?;
            let data = cfg.data.load(&cfg.synth, Split::Train)?;
            let parts = if parts.is_empty() { (0..cfg.model.parts).collect() } else { parts };
            let panel = viz::viz_parts(patch(&model), &state.store, &first_images(&data, count), &parts, scale)?;
            save_png(&panel, &out.join("parts.png"))?;
        }
        Command::Crops {
            checkpoint, part, k, size, ..
        } => {
            let (model, state) = load_patch(&mut cfg, &checkpoint)?;
            snapshot(&cfg, out)?;
            let data = cfg.data.load(&cfg.synth, Split::Train)?;
            let occ: Tensor<f64> = viz::dataset_occurrences(patch(&model), &state.store, &data.dataset, 256)?.cast();
            let parts: Vec<usize> = match part {
                Some(p) if p >= cfg.model.parts => bail!("part {p} out of range for {} parts", cfg.model.parts),
                Some(p) => vec![p],
                None => (0..cfg.model.parts).collect(),
            };
            let mut csv = String::from("part,rank,image,cell_y,cell_x,score\n");
            for p in parts {
                let crops = top_crops_from_occurrences(&occ, &data.dataset, p, k, size)?;
                for (r, c) in crops.iter().enumerate() {
                    csv += &format!("{p},{r},{},{},{},{}\n", c.image, c.cell_y, c.cell_x, c.score);
                }
                save_png(&crop_mosaic(&crops, 10, 4), &out.join(format!("crops_part{p}.png")))?;
            }
            write(&out.join("crops.csv"), csv)?;
            if let Some(synth) = &data.synth {
                let r = part_discovery(&occ, synth, k)?;
                let mut txt = format!(
                    "inside {:.6}\noutside {:.6}\nratio {:.4}\nbest_part {}\nbest_part_hits {}/{}\n",
                    r.inside, r.outside, r.ratio, r.best_part, r.best_hits, r.k
                );
                for p in &r.parts {
                    txt += &format!("part {} inside {:.6} outside {:.6} ratio {:.4}\n", p.part, p.inside, p.outside, p.ratio);
                }
                print!("{txt}");
                write(&out.join("discovery.txt"), txt)?;
            }
        }
        Command::Swap {
            checkpoint,
            source,
            source_part,
            target,
            target_part,
            scale,
            ..
        } => {
            let (model, state) = load_patch(&mut cfg, &checkpoint)?;
            snapshot(&cfg, out)?;
            let ds = cfg.data.load(&cfg.synth, Split::Train)?.dataset;
            for i in [source, target] {
                if i >= ds.len() {
                    bail!("image {i} out of range for {} images", ds.len());
                }
            }
            let (src, tgt): (Tensor32, Tensor32) = (ds.images(&[source]), ds.images(&[target]));
            let s = viz::swap_appearance(patch(&model), &state.store, &src, source_part, &tgt, target_part)?;
            save_png(&viz::swap_panel(&src, &tgt, &s, scale)?, &out.join("swap.png"))?;
            let ratio = viz::swap_delta_ratio(&s, target_part).map_or_else(|e| format!("undefined ({e})"), |r| r.to_string());
            write(
                &out.join("swap.csv"),
                format!("source,source_part,target,target_part,delta_ratio\n{source},{source_part},{target},{target_part},{ratio}\n"),
            )?;
        }
        Command::ReconMetrics { checkpoint, .. } => {
            let state = load_checkpoint::<f32>(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            cfg.model = state.model_config.clone();
            snapshot(&cfg, out)?;
            let model = state.model()?;
            let ds = cfg.test_data.load(&cfg.synth, Split::Test)?.dataset;
            let mut recons = Vec::new();
            let mut inputs = Vec::new();
            for idx in patchvae::data::minibatches(ds.len(), 256, None)? {
                let x: Tensor32 = ds.images(&idx);
                recons.push(reconstruct(&model, &state.store, &x)?);
                inputs.push(x);
            }
            let (x, xhat) = (Tensor32::concat_outer(&inputs)?, Tensor32::concat_outer(&recons)?);
            let (p, s) = (mean_psnr(&x, &xhat)?, ssim(&x, &xhat)?);
            println!("{}: PSNR {p:.3} dB  SSIM {s:.4}  ({} images)", cfg.model.kind.name(), ds.len());
            write(&out.join("recon_metrics.csv"), format!("model,images,psnr_db,ssim\n{},{},{p},{s}\n", cfg.model.kind.name(), ds.len()))?;
        }
        Command::Gradcheck { .. } => {
            snapshot(&cfg, out)?;
            let cases = certification_suite(GradCheckConfig::default())?;
            let mut csv = String::from("case,max_rel_error,passed\n");
            for c in &cases {
                println!("{:<32} {:.3e} {}", c.name, c.report.max_rel_error(), if c.report.passed { "ok" } else { "FAIL" });
                csv += &format!("{},{},{}\n", c.name, c.report.max_rel_error(), c.report.passed);
            }
            write(&out.join("gradcheck.csv"), csv)?;
            let failed: Vec<_> = cases.iter().filter(|c| !c.report.passed).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Command::MakeSynth { .. } => {
            snapshot(&cfg, out)?;
            let synth = make_synthetic(&cfg.synth)?;
            let path = out.join("synth.pvds");
            synth.save(&path)?;
            log::info!("wrote {} ({} images)", path.display(), synth.dataset.len());
            let idx: Vec<usize> = (0..16.min(synth.dataset.len())).collect();
            let preview = viz::mask_panel::<f32>(&synth.dataset.images(&idx), 4)?;
            save_png(&preview, &out.join("preview.png"))?;
        }
        Command::Masks { count, scale, .. } => {
            snapshot(&cfg, out)?;
            let data = cfg.data.load(&cfg.synth, Split::Train)?;
            save_png(&viz::mask_panel(&first_images(&data, count), scale)?, &out.join("masks.png"))?;
        }
        Command::Sweep { k, .. } => {
            if cfg.model.kind != ModelKind::PatchVae {
                bail!("sweeps need model.kind = patchvae");
            }
            snapshot(&cfg, out)?;
            let data = cfg.data.load(&cfg.synth, Split::Train)?;
            let synth = data.synth.context("sweeps score part discovery and need a synthetic data.source without data.limit")?;
            let path = out.join("sweep.csv");
            let mut csv = format!("{SWEEP_HEADER}\n");
            write(&path, &csv)?;
            run_sweep(&ablation_cells(&cfg.model), &cfg.train, &synth, k, |row| {
                log::info!("{}={} total {:.5} ratio {:.3}", row.cell.axis, row.cell.value, row.total, row.discovery_ratio);
                csv += &row.csv_line();
                csv.push('\n');
                // Partial results survive an interrupted sweep.
                if let Err(e) = fs::write(&path, &csv) {
                    log::warn!("could not update {}: {e}", path.display());
                }
            })?;
        }
        Command::Plots { history, .. } => {
            snapshot(&cfg, out)?;
            for p in emit_plots(&history, out)? {
                log::info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn reconstruct(model: &Model, store: &ParamStore32, x: &Tensor32) -> Result<Tensor32> {
    Ok(match model {
        Model::Patch(m) => m.reconstruct(store, x)?.0,
        Model::Beta(m) => m.reconstruct(store, x)?.0,
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
