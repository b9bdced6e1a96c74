//! Qualitative artifacts: occurrence heatmaps, top-scoring patch crops,
//! appearance swaps, weight-mask panels and training curves. All of them
//! read eval-mode posteriors only.

pub mod discovery;
pub mod plots;

use image::{GrayImage, Rgb};
pub use image::RgbImage;

pub use discovery::{part_discovery, DiscoveryReport, PartAlignment};
pub use plots::{emit_plots, read_history_csv, HistoryRow};

use crate::data::{denormalize, minibatches, Dataset};
use crate::error::{Error, Result};
use crate::losses::laplacian_weight_mask;
use crate::model::{assemble, PatchVae, GRID_STRIDE};
use crate::nn::{Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Heatmap opacity over the input image.
pub const OVERLAY_ALPHA: f64 = 0.5;
/// Default crop side: two grid cells.
pub const CROP_SIZE: usize = 2 * GRID_STRIDE;

/// Black-red-yellow-white ramp for `q` in `[0, 1]`.
pub fn hot_colormap(q: f64) -> [u8; 3] {
    let q = q.clamp(0.0, 1.0);
    let ch = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0 * q), ch(3.0 * q - 1.0), ch(3.0 * q - 2.0)]
}

/// Normalized `[H, W, 3]` image to 8-bit RGB.
pub fn to_rgb<T: Scalar>(img: &Tensor<T>) -> Result<RgbImage> {
    let [h, w, 3] = img.shape() else {
        return Err(Error::shape("image", &[0, 0, 3], img.shape()));
    };
    let raw: Vec<u8> = img.data().iter().map(|&v| denormalize(v)).collect();
    Ok(RgbImage::from_raw(*w as u32, *h as u32, raw).expect("buffer matches dimensions"))
}

pub fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    image::imageops::resize(img, img.width() * factor, img.height() * factor, image::imageops::FilterType::Nearest)
}

/// Blend a nearest-upsampled `[h, w]` probability grid over `base`.
pub fn heatmap_overlay(base: &RgbImage, grid: &[f64], h: usize, w: usize, alpha: f64) -> RgbImage {
    let (cw, ch) = (base.width() as usize / w, base.height() as usize / h);
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let q = grid[(y as usize / ch).min(h - 1) * w + (x as usize / cw).min(w - 1)];
        let c = hot_colormap(q);
        let b = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| ((1.0 - alpha) * b[i] as f64 + alpha * c[i] as f64).round() as u8))
    })
}

fn paste(dst: &mut RgbImage, src: &RgbImage, x0: u32, y0: u32) {
    image::imageops::replace(dst, src, x0 as i64, y0 as i64);
}

fn check_part(model: &PatchVae, part: usize) -> Result<()> {
    if part >= model.config.parts {
        return Err(Error::Index(format!("part {part} with {} parts", model.config.parts)));
    }
    Ok(())
}

/// Panel with one row per entry of `parts` and one column per image; each
/// tile is the image with that part's occurrence map blended on top.
pub fn viz_parts<T: Scalar>(model: &PatchVae, store: &ParamStore<T>, images: &Tensor<T>, parts: &[usize], scale: u32) -> Result<RgbImage> {
    for &p in parts {
        check_part(model, p)?;
    }
    let post = model.posterior(store, images, Mode::Eval)?;
    let (n, hh, ww, _) = images.dims4()?;
    let (gh, gw) = model.config.grid();
    let np = model.config.parts;
    let (tw, th) = (ww as u32 * scale, hh as u32 * scale);
    let mut panel = RgbImage::new(tw * n as u32, th * parts.len() as u32);
    for i in 0..n {
        let base = upscale(&to_rgb(&images.slice_outer(i, i + 1).reshape(&[hh, ww, 3])?)?, scale);
        for (row, &p) in parts.iter().enumerate() {
            let grid: Vec<f64> = (0..gh * gw).map(|c| post.occ_probs.data()[(i * gh * gw + c) * np + p].as_f64()).collect();
            paste(&mut panel, &heatmap_overlay(&base, &grid, gh, gw, OVERLAY_ALPHA), i as u32 * tw, row as u32 * th);
        }
    }
    Ok(panel)
}

/// One scored occurrence of a part.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub image: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub score: f64,
    pub pixels: RgbImage,
}

/// Eval-mode occurrence probabilities of a whole dataset, `[n, h, w, N]`.
pub fn dataset_occurrences<T: Scalar>(model: &PatchVae, store: &ParamStore<T>, ds: &Dataset, batch: usize) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    for idx in minibatches(ds.len(), batch, None)? {
        parts.push(model.posterior(store, &ds.images::<T>(&idx), Mode::Eval)?.occ_probs);
    }
    Tensor::concat_outer(&parts)
}

/// Top-left corner of a `size` window centred on a grid cell, kept inside
/// the image.
pub fn crop_origin(cell: usize, size: usize, extent: usize) -> usize {
    let centre = cell * GRID_STRIDE + GRID_STRIDE / 2;
    centre.saturating_sub(size / 2).min(extent.saturating_sub(size))
}

/// The `k` highest-probability grid cells of `part` over the dataset,
/// score-descending (ties by image, then cell), each with a `size x size`
/// crop centred on the cell.
pub fn top_crops_from_occurrences(occ: &Tensor<f64>, ds: &Dataset, part: usize, k: usize, size: usize) -> Result<Vec<Crop>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (n, gh, gw, np) = occ.dims4()?;
    if part >= np {
        return Err(Error::Index(format!("part {part} with {np} parts")));
    }
    let size = size.min(ds.height).min(ds.width);
    let mut cells: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(n * gh * gw);
    for i in 0..n {
        for y in 0..gh {
            for x in 0..gw {
                cells.push((occ.data()[((i * gh + y) * gw + x) * np + part], i, y, x));
            }
        }
    }
    if cells.len() < k {
        log::warn!("only {} candidate cells for k = {k}; returning all", cells.len());
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    cells
        .into_iter()
        .take(k)
        .map(|(score, i, y, x)| {
            let (oy, ox) = (crop_origin(y, size, ds.height), crop_origin(x, size, ds.width));
            let img = ds.image_bytes(i);
            let pixels = RgbImage::from_fn(size as u32, size as u32, |cx, cy| {
                let p = ((oy + cy as usize) * ds.width + ox + cx as usize) * 3;
                Rgb([img[p], img[p + 1], img[p + 2]])
            });
            Ok(Crop {
                image: i,
                cell_y: y,
                cell_x: x,
                score,
                pixels,
            })
        })
        .collect()
}

pub fn top_crops<T: Scalar>(model: &PatchVae, store: &ParamStore<T>, ds: &Dataset, part: usize, k: usize, size: usize) -> Result<Vec<Crop>> {
    check_part(model, part)?;
    let occ: Tensor<f64> = dataset_occurrences(model, store, ds, 256)?.cast();
    top_crops_from_occurrences(&occ, ds, part, k, size)
}

/// Crops laid out left to right, wrapping every `per_row`, upscaled.
pub fn crop_mosaic(crops: &[Crop], per_row: usize, scale: u32) -> RgbImage {
    let Some(first) = crops.first() else {
        return RgbImage::new(0, 0);
    };
    let (cw, ch) = (first.pixels.width() * scale, first.pixels.height() * scale);
    let cols = per_row.min(crops.len()).max(1);
    let rows = crops.len().div_ceil(cols);
    let mut out = RgbImage::new(cols as u32 * cw, rows as u32 * ch);
    for (j, c) in crops.iter().enumerate() {
        paste(&mut out, &upscale(&c.pixels, scale), (j % cols) as u32 * cw, (j / cols) as u32 * ch);
    }
    out
}

/// Reconstructions of `target` before and after its appearance vector for
/// `target_part` is replaced by `source`'s vector for `source_part`. The
/// target's occurrence map is held fixed.
#[derive(Clone, Debug)]
pub struct SwapResult<T> {
    pub original: Tensor<T>,
    pub swapped: Tensor<T>,
    /// Hardened target occurrences, `[1, h, w, N]`.
    pub target_occurrence: Tensor<T>,
}

pub fn swap_appearance<T: Scalar>(
    model: &PatchVae,
    store: &ParamStore<T>,
    source: &Tensor<T>,
    source_part: usize,
    target: &Tensor<T>,
    target_part: usize,
) -> Result<SwapResult<T>> {
    check_part(model, source_part)?;
    check_part(model, target_part)?;
    let d = model.config.part_dim;
    let (_, _, src_code) = model.reconstruct(store, source)?;
    let (original, _, tgt_code) = model.reconstruct(store, target)?;
    let mut app = tgt_code.app_samples.clone();
    app.data_mut()[target_part * d..(target_part + 1) * d]
        .copy_from_slice(&src_code.app_samples.data()[source_part * d..(source_part + 1) * d]);
    let code = assemble(&tgt_code.occ_samples, &app)?;
    let swapped = model.decode(store, &code.zhat, Mode::Eval)?;
    Ok(SwapResult {
        original,
        swapped,
        target_occurrence: tgt_code.occ_samples,
    })
}

/// Mean absolute pixel change inside cells where `part` occurs, divided by
/// the mean change elsewhere.
pub fn swap_delta_ratio<T: Scalar>(swap: &SwapResult<T>, part: usize) -> Result<f64> {
    let (_, h, w, _) = swap.original.dims4()?;
    let (_, gh, gw, np) = swap.target_occurrence.dims4()?;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let on = swap.target_occurrence.data()[((y / (h / gh)) * gw + x / (w / gw)) * np + part] > T::zero();
            for c in 0..3 {
                let i = (y * w + x) * 3 + c;
                let dlt = (swap.original.data()[i] - swap.swapped.data()[i]).abs().as_f64();
                if on {
                    si += dlt;
                    ni += 1;
                } else {
                    so += dlt;
                    no += 1;
                }
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::Config(format!("part {part} occurs in none or all cells; ratio undefined")));
    }
    Ok((si / ni as f64) / (so / no as f64).max(f64::MIN_POSITIVE))
}

/// Source, target, target reconstruction and swapped reconstruction, left
/// to right.
pub fn swap_panel<T: Scalar>(source: &Tensor<T>, target: &Tensor<T>, swap: &SwapResult<T>, scale: u32) -> Result<RgbImage> {
    let (_, h, w, _) = target.dims4()?;
    let (tw, th) = (w as u32 * scale, h as u32 * scale);
    let mut out = RgbImage::new(4 * tw, th);
    for (j, t) in [source, target, &swap.original, &swap.swapped].into_iter().enumerate() {
        let img = t.slice_outer(0, 1).reshape(&[h, w, 3])?;
        paste(&mut out, &upscale(&to_rgb(&img)?, scale), j as u32 * tw, 0);
    }
    Ok(out)
}

/// One row per image: the image and its weight mask, side by side.
pub fn mask_panel<T: Scalar>(images: &Tensor<T>, scale: u32) -> Result<RgbImage> {
    let (n, h, w, _) = images.dims4()?;
    let (tw, th) = (w as u32 * scale, h as u32 * scale);
    let mut out = RgbImage::new(2 * tw, n as u32 * th);
    for i in 0..n {
        let img = images.slice_outer(i, i + 1).reshape(&[h, w, 3])?;
        let mask: GrayImage = laplacian_weight_mask(&img)?.to_gray_image(GRID_STRIDE);
        let mask_rgb = RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
            let v = mask.get_pixel(x, y).0[0];
            Rgb([v, v, v])
        });
        paste(&mut out, &upscale(&to_rgb(&img)?, scale), 0, i as u32 * th);
        paste(&mut out, &upscale(&mask_rgb, scale), tw, i as u32 * th);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_half_map_is_uniform_overlay() {
        let base = RgbImage::from_pixel(16, 16, Rgb([0, 0, 0]));
        let out = heatmap_overlay(&base, &[0.5; 4], 2, 2, 0.5);
        let first = *out.get_pixel(0, 0);
        assert!(out.pixels().all(|p| *p == first));
        let c = hot_colormap(0.5);
        assert_eq!(first.0, c.map(|v| (v as f64 * 0.5).round() as u8));
    }

    #[test]
    fn crop_window_is_centred_and_clamped() {
        assert_eq!(crop_origin(1, 16, 32), 4);
        assert_eq!(crop_origin(0, 16, 32), 0);
        assert_eq!(crop_origin(3, 16, 32), 16);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(hot_colormap(0.0), [0, 0, 0]);
        assert_eq!(hot_colormap(1.0), [255, 255, 255]);
    }
}
