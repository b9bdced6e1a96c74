//! Part discovery scored against synthetic ground-truth occupancy.

use super::{top_crops_from_occurrences, CROP_SIZE};
use crate::data::SynthData;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PartAlignment {
    pub part: usize,
    pub inside: f64,
    pub outside: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryReport {
    /// Mean occurrence probability over all parts in motif cells.
    pub inside: f64,
    /// Same, over cells without a motif.
    pub outside: f64,
    pub ratio: f64,
    pub parts: Vec<PartAlignment>,
    /// Part with the highest inside/outside ratio.
    pub best_part: usize,
    /// Top-`k` crops of `best_part` whose anchor cell holds a motif.
    pub best_hits: usize,
    pub k: usize,
}

impl DiscoveryReport {
    pub fn hit_rate(&self) -> f64 {
        self.best_hits as f64 / self.k as f64
    }
}

fn ratio(inside: f64, outside: f64) -> f64 {
    if outside > 0.0 {
        inside / outside
    } else if inside > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Score eval-mode occurrences `occ` (`[n, h, w, N]`) of `synth`'s images.
pub fn part_discovery(occ: &Tensor<f64>, synth: &SynthData, k: usize) -> Result<DiscoveryReport> {
    let (n, gh, gw, np) = occ.dims4()?;
    let g = synth.grid();
    if n != synth.dataset.len() || gh != g || gw != g {
        return Err(Error::shape("occurrence maps", &[synth.dataset.len(), g, g, np], occ.shape()));
    }
    let mut sums = vec![[0.0f64; 2]; np];
    let mut counts = [0usize; 2];
    for i in 0..n {
        for y in 0..gh {
            for x in 0..gw {
                let side = usize::from(!synth.motif_cell(i, y, x));
                counts[side] += 1;
                let row = &occ.data()[((i * gh + y) * gw + x) * np..][..np];
                for (s, &q) in sums.iter_mut().zip(row) {
                    s[side] += q;
                }
            }
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Config("ground truth has no motif cells or no background cells".into()));
    }
    let parts: Vec<PartAlignment> = sums
        .iter()
        .enumerate()
        .map(|(part, s)| {
            let (inside, outside) = (s[0] / counts[0] as f64, s[1] / counts[1] as f64);
            PartAlignment {
                part,
                inside,
                outside,
                ratio: ratio(inside, outside),
            }
        })
        .collect();
    let inside = parts.iter().map(|p| p.inside).sum::<f64>() / np as f64;
    let outside = parts.iter().map(|p| p.outside).sum::<f64>() / np as f64;
    let best_part = parts
        .iter()
        .fold(0, |best, p| if p.ratio > parts[best].ratio { p.part } else { best });
    let crops = top_crops_from_occurrences(occ, &synth.dataset, best_part, k, CROP_SIZE)?;
    let best_hits = crops.iter().filter(|c| synth.motif_cell(c.image, c.cell_y, c.cell_x)).count();
    Ok(DiscoveryReport {
        inside,
        outside,
        ratio: ratio(inside, outside),
        parts,
        best_part,
        best_hits,
        k: crops.len(),
    })
}
