//! Class-per-subdirectory image trees (PNG/JPEG). Classes are labelled in
//! sorted-name order; each image is resized so its shorter side equals the
//! target size and then center-cropped to a square.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;

use super::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FolderLoad {
    pub dataset: Dataset,
    /// Files that failed to decode.
    pub skipped: Vec<PathBuf>,
}

/// Size after scaling the shorter side of `w x h` to `size`.
pub fn resize_dims(w: u32, h: u32, size: u32) -> (u32, u32) {
    let scale = |long: u32, short: u32| ((long as f64 * size as f64 / short as f64).round() as u32).max(size);
    if w <= h {
        (size, scale(h, w))
    } else {
        (scale(w, h), size)
    }
}

pub fn resize_center_crop(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = resize_dims(img.width(), img.height(), size);
    let resized = if (w, h) == img.dimensions() {
        img.clone()
    } else {
        imageops::resize(img, w, h, FilterType::Triangle)
    };
    imageops::crop_imm(&resized, (w - size) / 2, (h - size) / 2, size, size).to_image()
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))? {
        let p = e?.path();
        if p.is_dir() == want_dirs {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_image_folder(root: &Path, size: u32, split: Split) -> Result<FolderLoad> {
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let classes = sorted_entries(root, true)?;
    if classes.is_empty() {
        return Err(Error::data(root, "no class subdirectories"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    let mut skipped = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut count = 0;
        for file in sorted_entries(dir, false)? {
            match image::open(&file) {
                Ok(img) => {
                    pixels.extend_from_slice(resize_center_crop(&img.to_rgb8(), size).as_raw());
                    labels.push(label);
                    count += 1;
                }
                Err(e) => {
                    log::warn!("skipping undecodable image {}: {e}", file.display());
                    skipped.push(file);
                }
            }
        }
        if count == 0 {
            return Err(Error::data(dir, "class folder contains no decodable images"));
        }
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} undecodable files under {}", skipped.len(), root.display());
    }
    let s = size as usize;
    Ok(FolderLoad {
        dataset: Dataset::new(s, s, pixels, labels, names, split)?,
        skipped,
    })
}
