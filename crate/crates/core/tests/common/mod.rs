//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use patchvae::Tensor64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Monte Carlo `KL(N(mu, exp(lv)) || N(0, 1))` from log-density differences.
pub fn gaussian_kl_mc(mu: f64, lv: f64, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let sd = (0.5 * lv).exp();
    let xs: Vec<f64> = (0..samples)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            let z = mu + sd * e;
            let log_q = -0.5 * e * e - 0.5 * lv;
            let log_p = -0.5 * z * z;
            log_q - log_p
        })
        .collect();
    mean_se(&xs)
}

/// Monte Carlo `KL(Bern(q) || Bern(p))`.
pub fn bernoulli_kl_mc(q: f64, p: f64, samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let xs: Vec<f64> = (0..samples)
        .map(|_| {
            if rng.random::<f64>() < q {
                (q / p).ln()
            } else {
                ((1.0 - q) / (1.0 - p)).ln()
            }
        })
        .collect();
    mean_se(&xs)
}

fn unit(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// PSNR of one image pair on `[-1, 1]` data, straight from the definition.
pub fn psnr_reference(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (unit(*x) - unit(*y)).powi(2)).sum::<f64>() / a.len() as f64;
    -10.0 * mse.log10()
}

/// SSIM of one `[h, w, 3]` pair: every fully contained window is visited
/// directly with a 2-D Gaussian and its own weighted moments.
pub fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let luma = |img: &[f64]| -> Vec<f64> {
        img.chunks(3).map(|p| 0.299 * unit(p[0]) + 0.587 * unit(p[1]) + 0.114 * unit(p[2])).collect()
    };
    let (ga, gb) = (luma(a), luma(b));
    let s = 11.min(h).min(w);
    let c = (s as f64 - 1.0) / 2.0;
    let mut win = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            win[i * s + j] = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - s {
        for x in 0..=w - s {
            let at = |img: &[f64], i: usize, j: usize| img[(y + i) * w + x + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..s {
                for j in 0..s {
                    ma += win[i * s + j] * at(&ga, i, j);
                    mb += win[i * s + j] * at(&gb, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..s {
                for j in 0..s {
                    let (da, db) = (at(&ga, i, j) - ma, at(&gb, i, j) - mb);
                    va += win[i * s + j] * da * da;
                    vb += win[i * s + j] * db * db;
                    cov += win[i * s + j] * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// A random image and a noisy copy, both on `[-1, 1]`, shaped `[1, h, w, 3]`.
pub fn image_pair(h: usize, w: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Tensor64, Tensor64) {
    let a = Tensor64::from_fn(&[1, h, w, 3], |_| rng.random_range(-1.0..1.0));
    let b = Tensor64::from_fn(&[1, h, w, 3], |i| (a.data()[i] + noise * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0));
    (a, b)
}
