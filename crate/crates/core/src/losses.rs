//! Reconstruction losses, the gradient-energy weight mask, and the complete
//! PatchVAE and beta-VAE objectives.
//!
//! Reductions: reconstruction terms are means over pixel values and batch.
//! KL terms are summed over latent elements per image, divided by the number
//! of pixel values per image, and averaged over the batch, so every term is
//! the summed-form objective scaled by the same constant.

use crate::distributions::{self, BernoulliParams, GaussianParams};
use crate::error::{Error, Result};
use crate::model::{BetaForward, ModelConfig, PatchForward, PatchPosterior, GRID_STRIDE};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Luminance weights applied to RGB before the Laplacian.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReconKind {
    #[default]
    Plain,
    /// Per-cell MSE weighted by normalized Laplacian energy.
    Weighted,
}

impl ReconKind {
    pub fn name(self) -> &'static str {
        match self {
            ReconKind::Plain => "plain",
            ReconKind::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ReconKind::Plain),
            "weighted" => Ok(ReconKind::Weighted),
            _ => Err(Error::Config(format!("unknown loss variant {s:?}"))),
        }
    }
}

/// One nonnegative weight per 8x8 cell, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMask<T> {
    /// `[H / 8, W / 8]`
    pub weights: Tensor<T>,
}

impl<T: Scalar> WeightMask<T> {
    pub fn uniform(cells_h: usize, cells_w: usize) -> Self {
        let v = T::one() / T::from_usize(cells_h * cells_w).unwrap();
        Self {
            weights: Tensor::full(&[cells_h, cells_w], v),
        }
    }

    /// 8-bit grayscale rendering, brightest cell at 255, each cell drawn as
    /// a `cell x cell` block.
    pub fn to_gray_image(&self, cell: usize) -> image::GrayImage {
        let (ch, cw) = (self.weights.shape()[0], self.weights.shape()[1]);
        let max = self.weights.data().iter().copied().fold(T::zero(), T::max);
        let scale = if max > T::zero() { 255.0 / max.as_f64() } else { 0.0 };
        image::GrayImage::from_fn((cw * cell) as u32, (ch * cell) as u32, |x, y| {
            let v = self.weights.data()[(y as usize / cell) * cw + x as usize / cell].as_f64();
            image::Luma([(v * scale).round().clamp(0.0, 255.0) as u8])
        })
    }
}

fn image_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(Error::shape("image [H, W, 3]", &[0, 0, 3], s)),
    }
}

pub fn luminance<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = image_dims(x)?;
    let (r, g, b) = (T::lit(LUMA[0]), T::lit(LUMA[1]), T::lit(LUMA[2]));
    let data = x.data().chunks_exact(3).map(|p| r * p[0] + g * p[1] + b * p[2]).collect();
    Tensor::from_vec(vec![h, w], data)
}

/// 4-neighbour Laplacian with replicated borders.
pub fn laplacian<T: Scalar>(gray: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let d = gray.data();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[y * w + x]
    };
    let four = T::lit(4.0);
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - four * at(y, x)
    })
}

/// Gradient-energy mask of one `[H, W, 3]` image. A constant image has no
/// energy and gets the uniform mask.
pub fn laplacian_weight_mask<T: Scalar>(x: &Tensor<T>) -> Result<WeightMask<T>> {
    let (h, w) = image_dims(x)?;
    if h % GRID_STRIDE != 0 || w % GRID_STRIDE != 0 {
        return Err(Error::Config(format!("image {h}x{w} is not a multiple of {GRID_STRIDE}")));
    }
    let lap = laplacian(&luminance(x)?);
    let (ch, cw) = (h / GRID_STRIDE, w / GRID_STRIDE);
    let mut cells = vec![T::zero(); ch * cw];
    for (i, v) in lap.data().iter().enumerate() {
        let (y, xx) = (i / w, i % w);
        cells[(y / GRID_STRIDE) * cw + xx / GRID_STRIDE] += v.abs();
    }
    let total: T = cells.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Ok(WeightMask::uniform(ch, cw));
    }
    // Cell means share the 1/64 factor, which cancels in the normalization.
    cells.iter_mut().for_each(|c| *c /= total);
    Ok(WeightMask {
        weights: Tensor::from_vec(vec![ch, cw], cells)?,
    })
}

/// Masks for every image of an `[n, H, W, 3]` batch, stacked to `[n, H/8, W/8]`.
pub fn batch_weight_masks<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, _) = x.dims4()?;
    let mut data = Vec::with_capacity(n * (h / GRID_STRIDE) * (w / GRID_STRIDE));
    for i in 0..n {
        let img = x.slice_outer(i, i + 1).reshape(&[h, w, 3])?;
        data.extend_from_slice(laplacian_weight_mask(&img)?.weights.data());
    }
    Tensor::from_vec(vec![n, h / GRID_STRIDE, w / GRID_STRIDE], data)
}

/// Mean squared error over every element.
pub fn l2_recon<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>) -> Result<T> {
    Ok(x.zip_map(xhat, |a, b| (a - b) * (a - b))?.mean())
}

/// `sum_cells weight(cell) * mse(cell)` for one `[H, W, C]` image.
pub fn weighted_recon<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>, mask: &WeightMask<T>) -> Result<T> {
    if x.shape() != xhat.shape() || x.rank() != 3 {
        return Err(Error::shape("weighted_recon", x.shape(), xhat.shape()));
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let expect = [h / GRID_STRIDE, w / GRID_STRIDE];
    if mask.weights.shape() != expect {
        return Err(Error::shape("weighted_recon mask", &expect, mask.weights.shape()));
    }
    let mut g = Graph::new();
    let shape4 = [1, h, w, x.shape()[2]];
    let a = g.constant(x.clone().reshape(&shape4)?);
    let b = g.constant(xhat.clone().reshape(&shape4)?);
    let weights = mask.weights.clone().reshape(&[1, expect[0], expect[1]])?;
    let loss = g.cell_weighted_mse(a, b, weights, GRID_STRIDE)?;
    Ok(g.scalar_value(loss))
}

/// Loss terms and the weights that combined them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_occ: f64,
    pub kl_app: f64,
    pub total: f64,
    pub weight_occ: f64,
    pub weight_app: f64,
}

impl LossBreakdown {
    pub fn combine(recon: f64, kl_occ: f64, kl_app: f64, weight_occ: f64, weight_app: f64) -> Self {
        Self {
            recon,
            kl_occ,
            kl_app,
            total: recon + weight_occ * kl_occ + weight_app * kl_app,
            weight_occ,
            weight_app,
        }
    }

    pub fn recombined(&self) -> f64 {
        self.recon + self.weight_occ * self.kl_occ + self.weight_app * self.kl_app
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl_occ, self.kl_app, self.total].iter().all(|v| v.is_finite())
    }
}

/// Graph handles of an objective's terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl_occ: Option<Var>,
    pub kl_app: Var,
    pub weight_occ: f64,
    pub weight_app: f64,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            recon: g.scalar_value(self.recon).as_f64(),
            kl_occ: self.kl_occ.map(|v| g.scalar_value(v).as_f64()).unwrap_or(0.0),
            kl_app: g.scalar_value(self.kl_app).as_f64(),
            total: g.scalar_value(self.total).as_f64(),
            weight_occ: self.weight_occ,
            weight_app: self.weight_app,
        }
    }
}

/// Reconstruction term on the graph; `x` is a constant target.
pub fn recon_var<T: Scalar>(g: &mut Graph<T>, x: Var, xhat: Var, kind: ReconKind) -> Result<Var> {
    match kind {
        ReconKind::Plain => {
            let d = g.sub(xhat, x)?;
            let sq = g.square(d);
            Ok(g.mean_all(sq))
        }
        ReconKind::Weighted => {
            let masks = batch_weight_masks(g.value(x))?;
            g.cell_weighted_mse(xhat, x, masks, GRID_STRIDE)
        }
    }
}

/// Values per image of an NHWC batch.
fn pixel_values(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn kl_reduce<T: Scalar>(g: &mut Graph<T>, kl: Var, x: Var) -> Var {
    let norm = g.shape(x)[0] * pixel_values(g.shape(x));
    let s = g.sum_all(kl);
    g.scale(s, T::one() / T::from_usize(norm).unwrap())
}

/// `recon + beta_occ * sum KL(occ) + beta_app * sum KL(app)`.
pub fn patchvae_objective_vars<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    fwd: &PatchForward,
    cfg: &ModelConfig,
    kind: ReconKind,
) -> Result<LossVars> {
    let recon = recon_var(g, x, fwd.recon, kind)?;
    let kl_occ_el = g.kl_bernoulli(fwd.occ_probs, T::lit(cfg.prior()));
    let kl_occ = kl_reduce(g, kl_occ_el, x);
    let kl_app_el = g.kl_gaussian(fwd.app_mu, fwd.app_logvar)?;
    let kl_app = kl_reduce(g, kl_app_el, x);
    let wo = g.scale(kl_occ, T::lit(cfg.beta_occ));
    let wa = g.scale(kl_app, T::lit(cfg.beta_app));
    let t = g.add(recon, wo)?;
    let total = g.add(t, wa)?;
    Ok(LossVars {
        total,
        recon,
        kl_occ: Some(kl_occ),
        kl_app,
        weight_occ: cfg.beta_occ,
        weight_app: cfg.beta_app,
    })
}

/// `recon + beta * KL(q(z|x) || N(0, I))`.
pub fn betavae_objective_vars<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    fwd: &BetaForward,
    beta: f64,
    kind: ReconKind,
) -> Result<LossVars> {
    let recon = recon_var(g, x, fwd.recon, kind)?;
    let kl_el = g.kl_gaussian(fwd.mu, fwd.logvar)?;
    let kl = kl_reduce(g, kl_el, x);
    let wk = g.scale(kl, T::lit(beta));
    let total = g.add(recon, wk)?;
    Ok(LossVars {
        total,
        recon,
        kl_occ: None,
        kl_app: kl,
        weight_occ: 0.0,
        weight_app: beta,
    })
}

fn recon_value<T: Scalar>(x: &Tensor<T>, xhat: &Tensor<T>, kind: ReconKind) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(xhat.clone());
    let r = recon_var(&mut g, a, b, kind)?;
    Ok(g.scalar_value(r).as_f64())
}

/// Objective value from already-computed forward outputs.
pub fn patchvae_objective<T: Scalar>(
    x: &Tensor<T>,
    xhat: &Tensor<T>,
    posterior: &PatchPosterior<T>,
    cfg: &ModelConfig,
    kind: ReconKind,
) -> Result<LossBreakdown> {
    let n = T::from_usize(x.shape()[0] * pixel_values(x.shape())).unwrap();
    let recon = recon_value(x, xhat, kind)?;
    let q = BernoulliParams::new(posterior.occ_probs.clone());
    let kl_occ = (distributions::kl_bernoulli(&q, T::lit(cfg.prior()))?.sum() / n).as_f64();
    let app = GaussianParams::new(posterior.app_mu.clone(), posterior.app_logvar.clone())?;
    let kl_app = (distributions::kl_gaussian_std(&app) / n).as_f64();
    Ok(LossBreakdown::combine(recon, kl_occ, kl_app, cfg.beta_occ, cfg.beta_app))
}

pub fn betavae_objective<T: Scalar>(
    x: &Tensor<T>,
    xhat: &Tensor<T>,
    posterior: &GaussianParams<T>,
    beta: f64,
    kind: ReconKind,
) -> Result<LossBreakdown> {
    let n = T::from_usize(x.shape()[0] * pixel_values(x.shape())).unwrap();
    let recon = recon_value(x, xhat, kind)?;
    let kl = (distributions::kl_gaussian_std(posterior) / n).as_f64();
    Ok(LossBreakdown::combine(recon, 0.0, kl, 0.0, beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, 3], |i| f(i / (w * 3), (i / 3) % w, i % 3))
    }

    #[test]
    fn constant_image_gets_exact_uniform_mask() {
        let m = laplacian_weight_mask(&img(16, 24, |_, _, _| 0.3)).unwrap();
        assert_eq!(m.weights.shape(), &[2, 3]);
        assert!(m.weights.data().iter().all(|&w| w == 1.0 / 6.0));
    }

    #[test]
    fn interior_bright_pixel_puts_all_weight_in_its_cell() {
        let x = img(16, 16, |y, x, _| if (y, x) == (11, 4) { 1.0 } else { -1.0 });
        let m = laplacian_weight_mask(&x).unwrap();
        assert_eq!(m.weights.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn recon_identities() {
        let x = img(8, 8, |y, x, c| (y * 3 + x * 5 + c) as f64 / 40.0);
        assert_eq!(l2_recon(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.25);
        assert!((l2_recon(&x, &shifted).unwrap() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn weighted_recon_hand_example() {
        // Two 8x8 cells with weights (0.75, 0.25) and squared errors 1 and 4.
        let x = Tensor::zeros(&[8, 16, 3]);
        let xhat = img(8, 16, |_, x, _| if x < 8 { 1.0 } else { 2.0 });
        let mask = WeightMask {
            weights: Tensor::from_vec(vec![1, 2], vec![0.75, 0.25]).unwrap(),
        };
        assert!((weighted_recon(&x, &xhat, &mask).unwrap() - 1.75).abs() < 1e-12);
        let zero_first = WeightMask {
            weights: Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap(),
        };
        let only_first = img(8, 16, |_, x, _| if x < 8 { 3.0 } else { 0.0 });
        assert_eq!(weighted_recon(&x, &only_first, &zero_first).unwrap(), 0.0);
    }

    #[test]
    fn breakdown_combines_linearly() {
        let b = LossBreakdown::combine(0.5, 2.0, 3.0, 0.3, 0.1);
        assert!((b.total - (0.5 + 0.6 + 0.3)).abs() < 1e-15);
        let without = LossBreakdown::combine(0.5, 2.0, 3.0, 0.0, 0.1);
        assert!((b.total - without.total - 0.3 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn mask_image_scales_to_full_range() {
        let m = WeightMask {
            weights: Tensor::from_vec(vec![1, 2], vec![0.8f64, 0.2]).unwrap(),
        };
        let im = m.to_gray_image(8);
        assert_eq!(im.dimensions(), (16, 8));
        assert_eq!(im.get_pixel(0, 0).0[0], 255);
        assert_eq!(im.get_pixel(15, 7).0[0], 64);
    }
}
