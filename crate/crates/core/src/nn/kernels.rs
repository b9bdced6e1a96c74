//! Raw NHWC kernels shared by the graph ops. No autodiff bookkeeping here.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sliding-window geometry of a convolution over an NHWC input.
///
/// A transposed convolution reuses the geometry of the convolution it
/// inverts: its output is this geometry's input and vice versa.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn conv(
        batch: usize,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("kernel and stride must be >= 1".into()));
        }
        let out = |len: usize| -> Result<usize> {
            let padded = len + 2 * pad;
            if padded < kernel {
                return Err(Error::Config(format!(
                    "kernel {kernel} larger than padded input {padded}"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            kernel,
            stride,
            pad,
            out_h: out(in_h)?,
            out_w: out(in_w)?,
        })
    }

    /// Geometry for a transposed convolution taking `in_h x in_w` to
    /// `(in - 1) * stride - 2 * pad + kernel`.
    pub fn deconv(
        batch: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let out = |len: usize| -> Result<usize> {
            let full = (len - 1) * stride + kernel;
            if full <= 2 * pad {
                return Err(Error::Config("transposed convolution output is empty".into()));
            }
            Ok(full - 2 * pad)
        };
        let g = Self::conv(batch, out(in_h)?, out(in_w)?, out_c, kernel, stride, pad)?;
        debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
        Ok(g)
    }

    pub fn col_width(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_h * self.in_w * self.in_c
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// Unfold windows into rows of `(ky, kx, c)` values.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cw = g.col_width();
    let mut cols = vec![T::zero(); g.rows() * cw];
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * cw;
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                        let src = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let dst = row + (ky * g.kernel + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add rows back into `out` (input layout).
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let cw = g.col_width();
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * cw;
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                        let dst = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let src = row + (ky * g.kernel + kx) * c;
                        for (o, &v) in out[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Add a per-channel bias to a `[rows, channels]` matrix.
pub fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in y.chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Per-channel column sums of a `[rows, channels]` matrix.
pub fn channel_sums<T: Scalar>(y: &[T], channels: usize) -> Vec<T> {
    let mut s = vec![T::zero(); channels];
    for row in y.chunks_exact(channels) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

/// Max pooling with out-of-bounds positions ignored. Returns the output and
/// the flat input index selected for every output element.
pub fn maxpool_forward<T: Scalar>(x: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<usize>) {
    let c = g.in_c;
    let n_out = g.rows() * c;
    let mut out = vec![T::neg_infinity(); n_out];
    let mut arg = vec![usize::MAX; n_out];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * c;
                for ky in 0..g.kernel {
                    let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                    for kx in 0..g.kernel {
                        let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                        let src = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        for ch in 0..c {
                            let v = x[src + ch];
                            if v > out[o + ch] || arg[o + ch] == usize::MAX {
                                out[o + ch] = v;
                                arg[o + ch] = src + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Per-channel mean and biased variance over all rows of a `[rows, c]` matrix.
pub fn channel_moments<T: Scalar>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / channels;
    let inv = T::one() / T::from_usize(rows).unwrap();
    let mean: Vec<T> = channel_sums(x, channels).into_iter().map(|s| s * inv).collect();
    let mut var = vec![T::zero(); channels];
    for row in x.chunks_exact(channels) {
        for ((acc, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    (mean, var)
}
