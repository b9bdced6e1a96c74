//! Datasets: CIFAR binary batches, class-per-folder image trees, and a
//! synthetic repeated-motif generator. Pixels are kept as bytes and
//! normalized to `[-1, 1]` when a batch is materialized.

pub mod cifar;
pub mod folder;
pub mod synth;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use cifar::{load_cifar_binary, write_cifar_binary, CifarLayout};
pub use folder::{load_image_folder, resize_dims, FolderLoad};
pub use synth::{make_synthetic, make_synthetic_split, SynthData, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `2 * (p / 255) - 1`
pub fn normalize<T: Scalar>(p: u8) -> T {
    T::lit(2.0 * (p as f64 / 255.0) - 1.0)
}

/// Inverse of [`normalize`], rounding to the nearest byte.
pub fn denormalize<T: Scalar>(v: T) -> u8 {
    ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Immutable labelled image collection, pixels stored HWC as bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        let num_classes = class_names.len();
        if pixels.len() != labels.len() * height * width * 3 {
            return Err(Error::shape("dataset pixels", &[labels.len(), height, width, 3], &[pixels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!("label {bad} with {num_classes} classes")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels,
            num_classes,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Normalized `[indices.len(), H, W, 3]` batch.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&p| normalize::<T>(p)));
        }
        Tensor::from_vec(vec![indices.len(), self.height, self.width, 3], data).expect("consistent batch shape")
    }

    pub fn all_images<T: Scalar>(&self) -> Tensor<T> {
        self.images(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image_bytes(i));
        }
        Self {
            pixels,
            labels: self.labels_of(indices),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: Vec::new(),
            labels: Vec::new(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    /// First `k` records of every class, in original order.
    pub fn limit_per_class(&self, k: usize) -> Self {
        let mut seen = vec![0usize; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= k
            })
            .collect();
        self.subset(&keep)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Index batches covering `0..count` exactly once; the last may be short.
/// `shuffle_seed = None` keeps the original order.
pub fn minibatches(count: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

pub fn batches_per_epoch(count: usize, batch_size: usize) -> usize {
    count.div_ceil(batch_size)
}
