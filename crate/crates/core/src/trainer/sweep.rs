//! One-axis ablation sweeps over part count, appearance size, occurrence
//! prior and occurrence-KL weight, one CSV row per cell.

use std::fmt::Write as _;

use super::{train, TrainConfig, TrainState};
use crate::data::SynthData;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::tensor::Tensor;
use crate::viz::part_discovery;

pub const PARTS_AXIS: [usize; 5] = [4, 8, 16, 32, 64];
pub const PART_DIM_AXIS: [usize; 3] = [3, 6, 9];
pub const PRIOR_AXIS: [f64; 3] = [0.01, 0.05, 0.1];
pub const BETA_OCC_AXIS: [f64; 3] = [0.06, 0.3, 0.6];

pub const SWEEP_HEADER: &str =
    "axis,value,parts,part_dim,occ_prior,beta_occ,params,steps,recon,kl_occ,kl_app,total,discovery_ratio,best_part_hits";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub axis: &'static str,
    pub value: String,
    pub model: ModelConfig,
}

/// Every cell: each axis varied alone around `base`.
pub fn ablation_cells(base: &ModelConfig) -> Vec<SweepCell> {
    let cell = |axis, value: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut model = base.clone();
        f(&mut model);
        SweepCell { axis, value, model }
    };
    let mut cells = Vec::new();
    for n in PARTS_AXIS {
        cells.push(cell("parts", n.to_string(), &|m| m.parts = n));
    }
    for d in PART_DIM_AXIS {
        cells.push(cell("part_dim", d.to_string(), &|m| m.part_dim = d));
    }
    for p in PRIOR_AXIS {
        cells.push(cell("occ_prior", p.to_string(), &|m| m.occ_prior = Some(p)));
    }
    for b in BETA_OCC_AXIS {
        cells.push(cell("beta_occ", b.to_string(), &|m| m.beta_occ = b));
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub params: usize,
    pub steps: u64,
    pub recon: f64,
    pub kl_occ: f64,
    pub kl_app: f64,
    pub total: f64,
    pub discovery_ratio: f64,
    pub best_part_hits: usize,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let m = &self.cell.model;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell.axis,
            self.cell.value,
            m.parts,
            m.part_dim,
            m.prior(),
            m.beta_occ,
            self.params,
            self.steps,
            self.recon,
            self.kl_occ,
            self.kl_app,
            self.total,
            self.discovery_ratio,
            self.best_part_hits
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(s, "{}", r.csv_line()).unwrap();
    }
    s
}

/// Train one cell on `synth` and score its part discovery with top-`k` crops.
pub fn run_cell(cell: &SweepCell, train_cfg: &TrainConfig, synth: &SynthData, k: usize) -> Result<SweepRow> {
    if cell.model.kind != ModelKind::PatchVae {
        return Err(Error::Config("ablation sweeps need model.kind = patchvae".into()));
    }
    let (model, mut state) = TrainState::<f32>::fresh(&cell.model, train_cfg)?;
    train(&model, &mut state, &synth.dataset, train_cfg, None)?;
    let last = state
        .epoch_summaries()
        .pop()
        .ok_or_else(|| Error::Config("sweep cell ran no training steps".into()))?;
    let patch = model.as_patch().expect("patchvae model");
    let occ: Tensor<f64> = crate::viz::dataset_occurrences(patch, &state.store, &synth.dataset, train_cfg.batch_size)?.cast();
    let report = part_discovery(&occ, synth, k)?;
    Ok(SweepRow {
        cell: cell.clone(),
        params: state.store.learnable_count(),
        steps: state.step,
        recon: last.loss.recon,
        kl_occ: last.loss.kl_occ,
        kl_app: last.loss.kl_app,
        total: last.loss.total,
        discovery_ratio: report.ratio,
        best_part_hits: report.best_hits,
    })
}

/// Run every cell in order; `on_row` sees each finished row.
pub fn run_sweep(
    cells: &[SweepCell],
    train_cfg: &TrainConfig,
    synth: &SynthData,
    k: usize,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let row = run_cell(cell, train_cfg, synth, k).map_err(|e| Error::Config(format!("sweep cell {}={}: {e}", cell.axis, cell.value)))?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
