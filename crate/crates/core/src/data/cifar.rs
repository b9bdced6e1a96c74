//! CIFAR binary batches: label byte(s) followed by 3072 channel-planar RGB
//! bytes per record. CIFAR-10 records carry one label byte; CIFAR-100
//! records carry a coarse and a fine label byte.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PIXEL_BYTES: usize = SIDE * SIDE * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarLayout {
    pub label_bytes: usize,
    /// Which of the label bytes is used.
    pub label_index: usize,
    pub num_classes: usize,
}

impl CifarLayout {
    pub const CIFAR10: Self = Self {
        label_bytes: 1,
        label_index: 0,
        num_classes: 10,
    };
    pub const CIFAR100: Self = Self {
        label_bytes: 2,
        label_index: 1,
        num_classes: 100,
    };
    pub const CIFAR100_COARSE: Self = Self {
        label_bytes: 2,
        label_index: 0,
        num_classes: 20,
    };

    pub fn record_len(&self) -> usize {
        self.label_bytes + PIXEL_BYTES
    }

    /// Layout implied by a standard file name, falling back to the file
    /// size when the name is not recognized.
    pub fn detect(path: &Path, len: usize) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == "train.bin" || name == "test.bin" {
            return Ok(Self::CIFAR100);
        }
        if name.starts_with("data_batch") || name.starts_with("test_batch") {
            return Ok(Self::CIFAR10);
        }
        let fits = |l: Self| len > 0 && len % l.record_len() == 0;
        match (fits(Self::CIFAR10), fits(Self::CIFAR100)) {
            (true, false) => Ok(Self::CIFAR10),
            (false, true) => Ok(Self::CIFAR100),
            _ => Err(Error::data(path, format!("unknown file size {len} for a CIFAR binary batch"))),
        }
    }
}

/// Parse one batch file into HWC pixels and labels.
pub fn parse_records(path: &Path, bytes: &[u8], layout: CifarLayout) -> Result<(Vec<u8>, Vec<usize>)> {
    let rec = layout.record_len();
    if bytes.is_empty() {
        return Err(Error::data(path, "empty file"));
    }
    let whole = bytes.len() / rec;
    if bytes.len() % rec != 0 {
        return Err(Error::data(
            path,
            format!("truncated record at byte offset {} ({} trailing bytes)", whole * rec, bytes.len() % rec),
        ));
    }
    let mut pixels = Vec::with_capacity(whole * PIXEL_BYTES);
    let mut labels = Vec::with_capacity(whole);
    for (r, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = chunk[layout.label_index] as usize;
        if label >= layout.num_classes {
            return Err(Error::data(
                path,
                format!("label {label} out of range at byte offset {}", r * rec + layout.label_index),
            ));
        }
        labels.push(label);
        let planes = &chunk[layout.label_bytes..];
        for i in 0..SIDE * SIDE {
            pixels.extend_from_slice(&[planes[i], planes[SIDE * SIDE + i], planes[2 * SIDE * SIDE + i]]);
        }
    }
    Ok((pixels, labels))
}

fn split_files(dir: &Path, split: Split) -> Option<(Vec<PathBuf>, CifarLayout)> {
    for root in [dir.to_path_buf(), dir.join("cifar-100-binary"), dir.join("cifar-10-batches-bin")] {
        let c100 = root.join(format!("{}.bin", split.name()));
        if c100.is_file() {
            return Some((vec![c100], CifarLayout::CIFAR100));
        }
        let c10: Vec<PathBuf> = match split {
            Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![root.join("test_batch.bin")],
        };
        if c10.iter().all(|p| p.is_file()) {
            return Some((c10, CifarLayout::CIFAR10));
        }
    }
    None
}

fn class_names(dir: &Path, layout: CifarLayout) -> Vec<String> {
    let candidates = match layout.num_classes {
        100 => ["fine_label_names.txt", "cifar-100-binary/fine_label_names.txt"],
        20 => ["coarse_label_names.txt", "cifar-100-binary/coarse_label_names.txt"],
        _ => ["batches.meta.txt", "cifar-10-batches-bin/batches.meta.txt"],
    };
    for c in candidates {
        if let Ok(text) = fs::read_to_string(dir.join(c)) {
            let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if names.len() == layout.num_classes {
                return names;
            }
        }
    }
    (0..layout.num_classes).map(|i| format!("class_{i}")).collect()
}

/// Load a split from a CIFAR-10 or CIFAR-100 binary directory, or a single
/// batch file. Record order is preserved.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let (files, layout) = if path.is_dir() {
        split_files(path, split).ok_or_else(|| Error::data(path, format!("no CIFAR binary files for the {split} split")))?
    } else {
        let len = fs::metadata(path).map_err(|e| Error::data(path, e.to_string()))?.len() as usize;
        (vec![path.to_path_buf()], CifarLayout::detect(path, len)?)
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::data(f, e.to_string()))?;
        let (p, l) = parse_records(f, &bytes, layout)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let names_dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
    Dataset::new(SIDE, SIDE, pixels, labels, class_names(names_dir, layout), split)
}

/// Write a 32x32 dataset in the given binary layout (other label bytes are
/// written as zero).
pub fn write_cifar_binary(ds: &Dataset, path: &Path, layout: CifarLayout) -> Result<()> {
    if ds.height != SIDE || ds.width != SIDE {
        return Err(Error::shape("CIFAR image", &[SIDE, SIDE], &[ds.height, ds.width]));
    }
    let mut out = Vec::with_capacity(ds.len() * layout.record_len());
    for i in 0..ds.len() {
        let mut label = vec![0u8; layout.label_bytes];
        label[layout.label_index] = u8::try_from(ds.labels[i]).map_err(|_| Error::Index(format!("label {}", ds.labels[i])))?;
        out.extend(label);
        let img = ds.image_bytes(i);
        for c in 0..3 {
            out.extend((0..SIDE * SIDE).map(|p| img[p * 3 + c]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}
