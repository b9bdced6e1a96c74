//! Reconstruction quality on images mapped from `[-1, 1]` to `[0, 1]`.

use crate::error::{Error, Result};
use crate::losses::LUMA;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn to_unit<T: Scalar>(v: T) -> f64 {
    (v.as_f64() + 1.0) / 2.0
}

/// `10 log10(1 / MSE)` over all elements, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::shape("psnr", x.shape(), xhat.shape()));
    }
    let mse = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| (to_unit(a) - to_unit(b)).powi(2))
        .sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized `size x size` Gaussian weights, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian_1d(size, sigma);
    (0..size * size).map(|i| g[i / size] * g[i % size]).collect()
}

/// Luminance of each `[H, W, 3]` image of a batch, on the unit range.
fn gray_images<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (n, h, w) = match x.shape() {
        [h, w, 3] => (1, *h, *w),
        [n, h, w, 3] => (*n, *h, *w),
        s => return Err(Error::shape("image batch [n, H, W, 3]", &[0, 0, 0, 3], s)),
    };
    let g = x
        .data()
        .chunks_exact(3)
        .map(|p| LUMA[0] * to_unit(p[0]) + LUMA[1] * to_unit(p[1]) + LUMA[2] * to_unit(p[2]))
        .collect();
    Ok((n, h, w, g))
}

/// Valid-mode separable filtering with a 1-D kernel along both axes.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let s = k.len();
    let (oh, ow) = (h - s + 1, w - s + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..s).map(|j| k[j] * img[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..s).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM of grayscale images over all fully-contained 11x11
/// Gaussian windows (σ = 1.5), averaged over the batch. Images smaller than
/// the window use a window of their smaller side.
pub fn ssim<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::shape("ssim", x.shape(), xhat.shape()));
    }
    let (n, h, w, a) = gray_images(x)?;
    let (_, _, _, b) = gray_images(xhat)?;
    let k = gaussian_1d(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
    let mut total = 0.0;
    for i in 0..n {
        let a = &a[i * h * w..(i + 1) * h * w];
        let b = &b[i * h * w..(i + 1) * h * w];
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(u, v)| u * v).collect();
        let [mu_a, mu_b, e_aa, e_bb, e_ab] = [a, b, &aa, &bb, &ab].map(|m| filter_valid(m, h, w, &k));
        let map_sum: f64 = (0..mu_a.len())
            .map(|j| {
                let (ma, mb) = (mu_a[j], mu_b[j]);
                let va = e_aa[j] - ma * ma;
                let vb = e_bb[j] - mb * mb;
                let cov = e_ab[j] - ma * mb;
                ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
            })
            .sum();
        total += map_sum / mu_a.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mean per-image PSNR of an `[n, H, W, 3]` batch.
pub fn mean_psnr<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>) -> Result<f64> {
    let n = x.shape()[0];
    let mut s = 0.0;
    for i in 0..n {
        s += psnr(&x.slice_outer(i, i + 1), &xhat.slice_outer(i, i + 1))?;
    }
    Ok(s / n as f64)
}
