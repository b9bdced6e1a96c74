//! Synthetic repeated-motif images: a bank of framed colour motifs pasted at
//! grid-aligned positions over a low-amplitude noise background, with the
//! exact per-cell occupancy of every motif.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{denormalize, Dataset, Split};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::model::GRID_STRIDE;

const MAGIC: &[u8] = b"PVDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub canvas: usize,
    pub motif_count: usize,
    /// Side length in pixels; a multiple of the grid stride.
    pub motif_size: usize,
    pub motifs_per_image: usize,
    /// Background is uniform in `[-noise, noise]`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 2000,
            canvas: 32,
            motif_count: 4,
            motif_size: 8,
            motifs_per_image: 4,
            noise: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn tiles_per_side(&self) -> usize {
        self.canvas / self.motif_size
    }

    pub fn grid(&self) -> usize {
        self.canvas / GRID_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.motif_size == 0 || self.motif_size % GRID_STRIDE != 0 {
            return Err(Error::Config(format!("motif size {} is not a multiple of {GRID_STRIDE}", self.motif_size)));
        }
        if self.canvas == 0 || self.canvas % self.motif_size != 0 {
            return Err(Error::Config(format!("canvas {} is not a multiple of motif size {}", self.canvas, self.motif_size)));
        }
        if self.motif_count == 0 {
            return Err(Error::Config("motif bank must not be empty".into()));
        }
        let capacity = self.tiles_per_side().pow(2);
        if self.motifs_per_image > capacity {
            return Err(Error::Config(format!(
                "{} motifs per image exceed the grid capacity of {capacity}",
                self.motifs_per_image
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise level {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    fn manifest(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("count", self.count.to_string()),
            ("canvas", self.canvas.to_string()),
            ("motif_count", self.motif_count.to_string()),
            ("motif_size", self.motif_size.to_string()),
            ("motifs_per_image", self.motifs_per_image.to_string()),
            ("noise", self.noise.to_string()),
            ("seed", self.seed.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    fn from_manifest(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            let bad = |_| Error::Format(format!("bad manifest value {line:?}"));
            match k {
                "count" => spec.count = v.parse().map_err(bad)?,
                "canvas" => spec.canvas = v.parse().map_err(bad)?,
                "motif_count" => spec.motif_count = v.parse().map_err(bad)?,
                "motif_size" => spec.motif_size = v.parse().map_err(bad)?,
                "motifs_per_image" => spec.motifs_per_image = v.parse().map_err(bad)?,
                "noise" => spec.noise = v.parse().map_err(|_| Error::Format(format!("bad manifest value {line:?}")))?,
                "seed" => spec.seed = v.parse().map_err(bad)?,
                _ => return Err(Error::Format(format!("unknown manifest key {k:?}"))),
            }
        }
        Ok(spec)
    }
}

/// One pasted motif, in motif-tile coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub motif: usize,
    pub tile_y: usize,
    pub tile_x: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub dataset: Dataset,
    /// `[count, h, w, motif_count]`, 0 or 1.
    pub occupancy: Vec<u8>,
}

impl SynthData {
    pub fn grid(&self) -> usize {
        self.spec.grid()
    }

    pub fn occupied(&self, image: usize, y: usize, x: usize, motif: usize) -> bool {
        let g = self.grid();
        self.occupancy[((image * g + y) * g + x) * self.spec.motif_count + motif] == 1
    }

    /// Whether any motif covers grid cell `(y, x)` of `image`.
    pub fn motif_cell(&self, image: usize, y: usize, x: usize) -> bool {
        (0..self.spec.motif_count).any(|m| self.occupied(image, y, x, m))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new(MAGIC, VERSION);
        w.str(&self.spec.manifest());
        w.bytes(&self.dataset.pixels);
        let labels: Vec<u8> = self.dataset.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
        w.bytes(&labels);
        w.bytes(&self.occupancy);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
        let mut r = ByteReader::open(&bytes, MAGIC, VERSION)?;
        let spec = SynthSpec::from_manifest(&r.str()?)?;
        spec.validate()?;
        let pixels = r.bytes()?.to_vec();
        let labels = r
            .bytes()?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let occupancy = r.bytes()?.to_vec();
        let g = spec.grid();
        if occupancy.len() != spec.count * g * g * spec.motif_count {
            return Err(Error::Format("occupancy size does not match the manifest".into()));
        }
        let dataset = Dataset::new(spec.canvas, spec.canvas, pixels, labels, class_names(&spec), Split::Train)?;
        Ok(Self {
            spec,
            dataset,
            occupancy,
        })
    }
}

fn class_names(spec: &SynthSpec) -> Vec<String> {
    (0..spec.motif_count).map(|i| format!("motif_{i}")).collect()
}

/// A saturated fill colour framed by a one-pixel border of a second colour,
/// in `[-1, 1]`.
fn make_motif<R: Rng>(size: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut colour = || {
        let mut c = [0.0; 3];
        for v in &mut c {
            *v = if rng.random::<bool>() { rng.random_range(0.6..0.95) } else { rng.random_range(-0.95..-0.6) };
        }
        c
    };
    let (a, b) = (colour(), colour());
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            if y == 0 || x == 0 || y == size - 1 || x == size - 1 {
                b
            } else {
                a
            }
        })
        .collect()
}

/// Paste `placements[i]` into image `i`; occupancy is derived from the same
/// list.
pub fn render(spec: &SynthSpec, placements: &[Vec<Placement>], rng: &mut ChaCha8Rng, bank: &[Vec<[f64; 3]>]) -> Result<SynthData> {
    let (c, s, g) = (spec.canvas, spec.motif_size, spec.grid());
    let cells_per_tile = s / GRID_STRIDE;
    let mut pixels = Vec::with_capacity(placements.len() * c * c * 3);
    let mut occupancy = vec![0u8; placements.len() * g * g * spec.motif_count];
    let mut labels = Vec::with_capacity(placements.len());
    for (i, list) in placements.iter().enumerate() {
        let mut img: Vec<f64> = (0..c * c * 3)
            .map(|_| if spec.noise > 0.0 { rng.random_range(-spec.noise..=spec.noise) } else { 0.0 })
            .collect();
        for p in list {
            if p.motif >= spec.motif_count || p.tile_y >= spec.tiles_per_side() || p.tile_x >= spec.tiles_per_side() {
                return Err(Error::Index(format!("placement {p:?} outside the motif bank or grid")));
            }
            for y in 0..s {
                for x in 0..s {
                    let px = ((p.tile_y * s + y) * c + p.tile_x * s + x) * 3;
                    img[px..px + 3].copy_from_slice(&bank[p.motif][y * s + x]);
                }
            }
            for cy in 0..cells_per_tile {
                for cx in 0..cells_per_tile {
                    let (gy, gx) = (p.tile_y * cells_per_tile + cy, p.tile_x * cells_per_tile + cx);
                    occupancy[((i * g + gy) * g + gx) * spec.motif_count + p.motif] = 1;
                }
            }
        }
        pixels.extend(img.into_iter().map(denormalize::<f64>));
        labels.push(list.first().map_or(0, |p| p.motif));
    }
    let dataset = Dataset::new(c, c, pixels, labels, class_names(spec), Split::Train)?;
    Ok(SynthData {
        spec: SynthSpec {
            count: placements.len(),
            ..spec.clone()
        },
        dataset,
        occupancy,
    })
}

/// Motif bank and the generator stream positioned after it.
pub fn motif_bank(spec: &SynthSpec) -> (Vec<Vec<[f64; 3]>>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bank = (0..spec.motif_count).map(|_| make_motif(spec.motif_size, &mut rng)).collect();
    (bank, rng)
}

pub fn make_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    make_synthetic_split(spec, Split::Train)
}

/// Both splits share the motif bank; the test split draws its placements and
/// background from a separate stream.
pub fn make_synthetic_split(spec: &SynthSpec, split: Split) -> Result<SynthData> {
    spec.validate()?;
    let (bank, mut rng) = motif_bank(spec);
    if split == Split::Test {
        rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
    }
    let tiles = spec.tiles_per_side();
    let placements: Vec<Vec<Placement>> = (0..spec.count)
        .map(|_| {
            index::sample(&mut rng, tiles * tiles, spec.motifs_per_image)
                .into_iter()
                .map(|t| Placement {
                    motif: rng.random_range(0..spec.motif_count),
                    tile_y: t / tiles,
                    tile_x: t % tiles,
                })
                .collect()
        })
        .collect();
    let mut data = render(spec, &placements, &mut rng, &bank)?;
    data.dataset.split = split;
    Ok(data)
}
