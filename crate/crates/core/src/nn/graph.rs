//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. Nodes that do not depend on a grad-requiring leaf
//! are skipped during backward, which also skips the input-gradient work of
//! a network's first layer.

use indexmap::IndexMap;

use super::kernels::{self, ConvGeometry};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    Exp(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Clamp(usize, T, T),
    Logit(usize, T),
    SumAll(usize),
    MeanAll(usize),
    Reshape(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    Deconv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    WeightedPool {
        values: usize,
        probs: usize,
        parts: usize,
        dim: usize,
        denom: Vec<T>,
    },
    Assemble {
        occ: usize,
        app: usize,
        parts: usize,
        dim: usize,
    },
    KlGaussian {
        mu: usize,
        logvar: usize,
    },
    KlBernoulli {
        q: usize,
        prior: T,
    },
    CellMse {
        a: usize,
        b: usize,
        weights: Tensor<T>,
        cell: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Build it forward, then call [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, usize>,
    stat_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            stat_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient (inputs, noise, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An anonymous leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Frozen parameters and buffers do not
    /// require grad. Repeated requests for one name share a node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(Var(i));
        }
        let entry = store.get(name)?;
        let v = self.push(entry.value.clone(), Op::Leaf, store.is_trainable(name));
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub(crate) fn record_stat_update(&mut self, name: String, value: Tensor<T>) {
        self.stat_updates.push((name, value));
    }

    /// Batchnorm running-statistic updates produced by train-mode forwards.
    pub fn take_stat_updates(&mut self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a.0);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a.0, slope), |x| {
            if x > T::zero() {
                x
            } else {
                x * slope
            }
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    /// Clamp into `[lo, hi]`; clamped elements pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.max(lo).min(hi))
    }

    /// `ln(q / (1 - q))` of `q` clamped to `[eps, 1 - eps]`.
    pub fn logit(&mut self, a: Var, eps: T) -> Var {
        self.unary(a, Op::Logit(a.0, eps), |q| {
            let q = q.max(eps).min(T::one() - eps);
            (q / (T::one() - q)).ln()
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::MeanAll(a.0), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a.0);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// NHWC convolution with weights `[k, k, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, h, wd, c) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let [k, k2, cin, cout] = ws[..] else {
            return Err(Error::shape("conv2d weight", &[0, 0, c, 0], &ws));
        };
        if k != k2 || cin != c {
            return Err(Error::shape("conv2d weight", &[k, k, c, cout], &ws));
        }
        let geom = ConvGeometry::conv(n, h, wd, c, k, stride, pad)?;
        let mut y = vec![T::zero(); geom.rows() * cout];
        let cols = if geom.is_pointwise() {
            T::gemm(geom.rows(), c, cout, self.value(x).data(), false, self.value(w).data(), false, &mut y, false);
            None
        } else {
            let cols = kernels::im2col(self.value(x).data(), &geom);
            T::gemm(geom.rows(), geom.col_width(), cout, &cols, false, self.value(w).data(), false, &mut y, false);
            Some(cols)
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", &[cout], self.shape(b)));
            }
            kernels::add_bias(&mut y, self.value(b).data());
        }
        let value = Tensor::from_vec(vec![n, geom.out_h, geom.out_w, cout], y)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let op = Op::Conv {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            geom,
            cols: if rg { cols } else { None },
        };
        Ok(self.push(value, op, rg))
    }

    /// NHWC transposed convolution with weights `[c_in, k, k, c_out]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, h, wd, c) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let [cin, k, k2, cout] = ws[..] else {
            return Err(Error::shape("conv_transpose2d weight", &[c, 0, 0, 0], &ws));
        };
        if k != k2 || cin != c {
            return Err(Error::shape("conv_transpose2d weight", &[c, k, k, cout], &ws));
        }
        let geom = ConvGeometry::deconv(n, h, wd, cout, k, stride, pad)?;
        let cw = geom.col_width();
        let mut out = vec![T::zero(); geom.input_len()];
        if geom.is_pointwise() {
            T::gemm(n * h * wd, c, cout, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        } else {
            let mut cols = vec![T::zero(); geom.rows() * cw];
            T::gemm(geom.rows(), c, cw, self.value(x).data(), false, self.value(w).data(), false, &mut cols, false);
            kernels::col2im(&cols, &geom, &mut out);
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv_transpose2d bias", &[cout], self.shape(b)));
            }
            kernels::add_bias(&mut out, self.value(b).data());
        }
        let value = Tensor::from_vec(vec![n, geom.in_h, geom.in_w, cout], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let op = Op::Deconv {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            geom,
        };
        Ok(self.push(value, op, rg))
    }

    /// Batch normalization over every axis but the last.
    ///
    /// With `batch_stats` the current batch moments are used and returned so
    /// the caller can fold them into running statistics; otherwise the given
    /// `(mean, var)` are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: BatchNormStats<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm affine", &[c], self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            BatchNormStats::Batch => {
                let (m, v) = kernels::channel_moments(xv, c);
                (m, v, true)
            }
            BatchNormStats::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for ((xr, hr), yr) in xv.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                yr[j] = g[j] * h + bt[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let value = Tensor::from_vec(shape, y)?;
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat: if rg { xhat } else { Vec::new() },
            inv_std,
            batch_stats,
        };
        let v = self.push(value, op, rg);
        Ok((v, batch_stats.then_some((mean, var))))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, h, w, c) = self.value(x).dims4()?;
        let geom = ConvGeometry::conv(n, h, w, c, kernel, stride, pad)?;
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), &geom);
        let value = Tensor::from_vec(vec![n, geom.out_h, geom.out_w, c], out)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::MaxPool { x: x.0, argmax }, rg))
    }

    /// `x [batch, in] * w [in, out] + b`. Higher-rank inputs are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let batch = xs[0];
        let fin: usize = xs[1..].iter().product();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != fin {
            return Err(Error::shape("linear weight", &[fin, ws.get(1).copied().unwrap_or(0)], &ws));
        }
        let fout = ws[1];
        let mut y = vec![T::zero(); batch * fout];
        T::gemm(batch, fin, fout, self.value(x).data(), false, self.value(w).data(), false, &mut y, false);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear bias", &[fout], self.shape(b)));
            }
            kernels::add_bias(&mut y, self.value(b).data());
        }
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        let value = Tensor::from_vec(vec![batch, fout], y)?;
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, rg))
    }

    /// Probability-weighted spatial average of per-location part features.
    ///
    /// `values` is `[n, h, w, parts * dim]`, `probs` is `[n, h, w, parts]`;
    /// the result is `[n, parts, dim]` with
    /// `out[i] = sum_l q[l,i] v[l,i] / (sum_l q[l,i] + eps)`.
    pub fn weighted_pool(&mut self, values: Var, probs: Var, parts: usize, eps: T) -> Result<Var> {
        let (n, h, w, cv) = self.value(values).dims4()?;
        let ps = self.shape(probs).to_vec();
        if ps != [n, h, w, parts] || cv % parts != 0 {
            return Err(Error::shape("weighted_pool probs", &[n, h, w, parts], &ps));
        }
        let dim = cv / parts;
        let l = h * w;
        let v = self.value(values).data();
        let q = self.value(probs).data();
        let mut out = vec![T::zero(); n * parts * dim];
        let mut denom = vec![eps; n * parts];
        for b in 0..n {
            for loc in 0..l {
                let qrow = &q[(b * l + loc) * parts..][..parts];
                let vrow = &v[(b * l + loc) * cv..][..cv];
                for i in 0..parts {
                    denom[b * parts + i] += qrow[i];
                    let o = &mut out[(b * parts + i) * dim..][..dim];
                    for (acc, &x) in o.iter_mut().zip(&vrow[i * dim..(i + 1) * dim]) {
                        *acc += qrow[i] * x;
                    }
                }
            }
        }
        for (chunk, &d) in out.chunks_exact_mut(dim).zip(&denom) {
            chunk.iter_mut().for_each(|x| *x /= d);
        }
        let rg = self.rg(values.0) || self.rg(probs.0);
        let value = Tensor::from_vec(vec![n, parts, dim], out)?;
        let op = Op::WeightedPool {
            values: values.0,
            probs: probs.0,
            parts,
            dim,
            denom,
        };
        Ok(self.push(value, op, rg))
    }

    /// Broadcast product placing `app[i]` at each location scaled by
    /// `occ[l, i]`, parts concatenated along channels: `[n, h, w, parts * dim]`.
    pub fn assemble(&mut self, occ: Var, app: Var) -> Result<Var> {
        let (n, h, w, parts) = self.value(occ).dims4()?;
        let as_ = self.shape(app).to_vec();
        if as_.len() != 3 || as_[0] != n || as_[1] != parts {
            return Err(Error::shape("assemble appearance", &[n, parts, 0], &as_));
        }
        let dim = as_[2];
        let l = h * w;
        let o = self.value(occ).data();
        let a = self.value(app).data();
        let cz = parts * dim;
        let mut z = vec![T::zero(); n * l * cz];
        for b in 0..n {
            for loc in 0..l {
                let zrow = &mut z[(b * l + loc) * cz..][..cz];
                for i in 0..parts {
                    let s = o[(b * l + loc) * parts + i];
                    let arow = &a[(b * parts + i) * dim..][..dim];
                    for (dst, &x) in zrow[i * dim..(i + 1) * dim].iter_mut().zip(arow) {
                        *dst = s * x;
                    }
                }
            }
        }
        let rg = self.rg(occ.0) || self.rg(app.0);
        let value = Tensor::from_vec(vec![n, h, w, cz], z)?;
        Ok(self.push(value, Op::Assemble { occ: occ.0, app: app.0, parts, dim }, rg))
    }

    /// Elementwise `KL(N(mu, exp(logvar)) || N(0, 1))`.
    pub fn kl_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape("kl_gaussian", mu, logvar)?;
        let half = T::lit(0.5);
        let value = self
            .value(mu)
            .zip_map(self.value(logvar), |m, lv| -half * (T::one() + lv - m * m - lv.exp()))?;
        let rg = self.rg(mu.0) || self.rg(logvar.0);
        Ok(self.push(value, Op::KlGaussian { mu: mu.0, logvar: logvar.0 }, rg))
    }

    /// Elementwise `KL(Bern(q) || Bern(prior))`; `q` must already be clamped.
    pub fn kl_bernoulli(&mut self, q: Var, prior: T) -> Var {
        let one = T::one();
        self.unary(q, Op::KlBernoulli { q: q.0, prior }, |q| {
            q * (q / prior).ln() + (one - q) * ((one - q) / (one - prior)).ln()
        })
    }

    /// Batch mean of per-image `sum_cells w[cell] * mse_within(cell)`.
    ///
    /// `a`, `b` are `[n, H, W, C]`; `weights` is `[n, H / cell, W / cell]`.
    pub fn cell_weighted_mse(&mut self, a: Var, b: Var, weights: Tensor<T>, cell: usize) -> Result<Var> {
        self.same_shape("cell_weighted_mse", a, b)?;
        let (n, h, w, c) = self.value(a).dims4()?;
        let expect = [n, h / cell, w / cell];
        if h % cell != 0 || w % cell != 0 || weights.shape() != expect {
            return Err(Error::shape("cell_weighted_mse weights", &expect, weights.shape()));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let per_cell = T::from_usize(cell * cell * c).unwrap();
        let (ch, cw) = (h / cell, w / cell);
        let wd = weights.data();
        let mut total = T::zero();
        for bi in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let wt = wd[(bi * ch + y / cell) * cw + x / cell];
                    let base = ((bi * h + y) * w + x) * c;
                    let sq: T = (0..c).map(|k| (av[base + k] - bv[base + k]).powi(2)).sum();
                    total += wt * sq / per_cell;
                }
            }
        }
        total /= T::from_usize(n).unwrap();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::scalar(total), Op::CellMse { a: a.0, b: b.0, weights, cell }, rg))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &[labels.len(), 0], &s));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} >= {classes} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (b, (row, prow)) in lv.chunks_exact(classes).zip(probs.chunks_exact_mut(classes)).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - m).exp();
                z += *p;
            }
            prow.iter_mut().for_each(|p| *p /= z);
            loss -= (row[labels[b]] - m) - z.ln();
        }
        loss /= T::from_usize(labels.len()).unwrap();
        let rg = self.rg(logits.0);
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss.0) {
            grads[loss.0] = Some(Tensor::full(ls, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        let requires: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        Ok(Gradients {
            grads,
            requires,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
        if !self.rg(i) {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Tensor<T>>], i: usize, g: &Tensor<T>, f: impl Fn(usize, T) -> T) {
        if !self.rg(i) {
            return;
        }
        let shape = self.nodes[i].value.shape();
        let data: Vec<T> = g.data().iter().enumerate().map(|(k, &gv)| f(k, gv)).collect();
        self.accumulate(grads, i, Tensor::from_vec(shape.to_vec(), data).expect("grad shape"));
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = self.nodes[i].value.data();
        let val = |j: usize| self.nodes[j].value.data();
        let one = T::one();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.elementwise(grads, *a, g, |_, gv| gv);
                self.elementwise(grads, *b, g, |_, gv| gv);
            }
            Op::Sub(a, b) => {
                self.elementwise(grads, *a, g, |_, gv| gv);
                self.elementwise(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.elementwise(grads, *a, g, |k, gv| gv * bv[k]);
                self.elementwise(grads, *b, g, |k, gv| gv * av[k]);
            }
            Op::Scale(a, s) => self.elementwise(grads, *a, g, |_, gv| gv * *s),
            Op::AddScalar(a) | Op::Reshape(a) => self.elementwise(grads, *a, g, |_, gv| gv),
            Op::Square(a) => {
                let av = val(*a);
                self.elementwise(grads, *a, g, |k, gv| gv * (av[k] + av[k]));
            }
            Op::Exp(a) => self.elementwise(grads, *a, g, |k, gv| gv * y[k]),
            Op::Relu(a) => {
                let av = val(*a);
                self.elementwise(grads, *a, g, |k, gv| if av[k] > T::zero() { gv } else { T::zero() });
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a);
                self.elementwise(grads, *a, g, |k, gv| if av[k] > T::zero() { gv } else { gv * *slope });
            }
            Op::Tanh(a) => self.elementwise(grads, *a, g, |k, gv| gv * (one - y[k] * y[k])),
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, |k, gv| gv * y[k] * (one - y[k])),
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                self.elementwise(grads, *a, g, |k, gv| {
                    if av[k] >= *lo && av[k] <= *hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Logit(a, eps) => {
                let av = val(*a);
                self.elementwise(grads, *a, g, |k, gv| {
                    let q = av[k];
                    if q >= *eps && q <= one - *eps {
                        gv / (q * (one - q))
                    } else {
                        T::zero()
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.elementwise_const(grads, *a, gv);
            }
            Op::MeanAll(a) => {
                let n = T::from_usize(self.nodes[*a].value.numel()).unwrap();
                self.elementwise_const(grads, *a, g.data()[0] / n);
            }
            Op::Conv { x, w, b, geom, cols } => {
                let cout = g.shape()[3];
                let gd = g.data();
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); geom.col_width() * cout];
                    let src: &[T] = match cols {
                        Some(c) => c,
                        None => val(*x),
                    };
                    T::gemm(geom.col_width(), geom.rows(), cout, src, true, gd, false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::from_vec(self.nodes[*w].value.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, Tensor::from_vec(vec![cout], kernels::channel_sums(gd, cout))?);
                    }
                }
                if self.rg(*x) {
                    let dx = if geom.is_pointwise() {
                        let mut dx = vec![T::zero(); geom.input_len()];
                        T::gemm(geom.rows(), cout, geom.in_c, gd, false, val(*w), true, &mut dx, false);
                        dx
                    } else {
                        let mut dcols = vec![T::zero(); geom.rows() * geom.col_width()];
                        T::gemm(geom.rows(), cout, geom.col_width(), gd, false, val(*w), true, &mut dcols, false);
                        let mut dx = vec![T::zero(); geom.input_len()];
                        kernels::col2im(&dcols, geom, &mut dx);
                        dx
                    };
                    self.accumulate(grads, *x, Tensor::from_vec(self.nodes[*x].value.shape().to_vec(), dx)?);
                }
            }
            Op::Deconv { x, w, b, geom } => {
                let gd = g.data();
                let cin = self.nodes[*x].value.shape()[3];
                let cw = geom.col_width();
                let rows = geom.rows();
                let dcols_owned;
                let dcols: &[T] = if geom.is_pointwise() {
                    gd
                } else {
                    dcols_owned = kernels::im2col(gd, geom);
                    &dcols_owned
                };
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); cin * cw];
                    T::gemm(cin, rows, cw, val(*x), true, dcols, false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::from_vec(self.nodes[*w].value.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let sums = kernels::channel_sums(gd, geom.in_c);
                        self.accumulate(grads, *b, Tensor::from_vec(vec![geom.in_c], sums)?);
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * cin];
                    T::gemm(rows, cw, cin, dcols, false, val(*w), true, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::from_vec(self.nodes[*x].value.shape().to_vec(), dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let gd = g.data();
                let gam = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (gr, hr) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    if *batch_stats {
                        let m = T::from_usize(gd.len() / c).unwrap();
                        for ((dr, gr), hr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let k = gam[j] * inv_std[j] / m;
                                dr[j] = k * (m * gr[j] - dbeta[j] - hr[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (dr, gr) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                            for j in 0..c {
                                dr[j] = gr[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.nodes[*x].value.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(vec![c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(vec![c], dbeta)?);
            }
            Op::MaxPool { x, argmax } => {
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[*x].value.shape();
                let batch = xs[0];
                let fin: usize = xs[1..].iter().product();
                let fout = g.shape()[1];
                let gd = g.data();
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fin * fout];
                    T::gemm(fin, batch, fout, val(*x), true, gd, false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::from_vec(vec![fin, fout], dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, Tensor::from_vec(vec![fout], kernels::channel_sums(gd, fout))?);
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    T::gemm(batch, fout, fin, gd, false, val(*w), true, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::from_vec(xs.to_vec(), dx)?);
                }
            }
            Op::WeightedPool {
                values,
                probs,
                parts,
                dim,
                denom,
            } => {
                let (parts, dim) = (*parts, *dim);
                let vs = self.nodes[*values].value.shape().to_vec();
                let (n, l, cv) = (vs[0], vs[1] * vs[2], vs[3]);
                let v = val(*values);
                let q = val(*probs);
                let gd = g.data();
                if self.rg(*values) {
                    let mut dv = vec![T::zero(); v.len()];
                    for b in 0..n {
                        for loc in 0..l {
                            for i in 0..parts {
                                let s = q[(b * l + loc) * parts + i] / denom[b * parts + i];
                                let grow = &gd[(b * parts + i) * dim..][..dim];
                                let drow = &mut dv[(b * l + loc) * cv + i * dim..][..dim];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d = gv * s;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *values, Tensor::from_vec(vs.clone(), dv)?);
                }
                if self.rg(*probs) {
                    let mut dq = vec![T::zero(); q.len()];
                    for b in 0..n {
                        for loc in 0..l {
                            for i in 0..parts {
                                let grow = &gd[(b * parts + i) * dim..][..dim];
                                let prow = &y[(b * parts + i) * dim..][..dim];
                                let vrow = &v[(b * l + loc) * cv + i * dim..][..dim];
                                let mut acc = T::zero();
                                for j in 0..dim {
                                    acc += grow[j] * (vrow[j] - prow[j]);
                                }
                                dq[(b * l + loc) * parts + i] = acc / denom[b * parts + i];
                            }
                        }
                    }
                    self.accumulate(grads, *probs, Tensor::from_vec(self.nodes[*probs].value.shape().to_vec(), dq)?);
                }
            }
            Op::Assemble { occ, app, parts, dim } => {
                let (parts, dim) = (*parts, *dim);
                let os = self.nodes[*occ].value.shape().to_vec();
                let (n, l) = (os[0], os[1] * os[2]);
                let cz = parts * dim;
                let o = val(*occ);
                let a = val(*app);
                let gd = g.data();
                if self.rg(*occ) {
                    let mut dof = vec![T::zero(); o.len()];
                    for b in 0..n {
                        for loc in 0..l {
                            for i in 0..parts {
                                let grow = &gd[(b * l + loc) * cz + i * dim..][..dim];
                                let arow = &a[(b * parts + i) * dim..][..dim];
                                dof[(b * l + loc) * parts + i] = grow.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                            }
                        }
                    }
                    self.accumulate(grads, *occ, Tensor::from_vec(os.clone(), dof)?);
                }
                if self.rg(*app) {
                    let mut da = vec![T::zero(); a.len()];
                    for b in 0..n {
                        for loc in 0..l {
                            for i in 0..parts {
                                let s = o[(b * l + loc) * parts + i];
                                let grow = &gd[(b * l + loc) * cz + i * dim..][..dim];
                                for (d, &gv) in da[(b * parts + i) * dim..][..dim].iter_mut().zip(grow) {
                                    *d += s * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *app, Tensor::from_vec(self.nodes[*app].value.shape().to_vec(), da)?);
                }
            }
            Op::KlGaussian { mu, logvar } => {
                let (m, lv) = (val(*mu), val(*logvar));
                let half = T::lit(0.5);
                self.elementwise(grads, *mu, g, |k, gv| gv * m[k]);
                self.elementwise(grads, *logvar, g, |k, gv| gv * half * (lv[k].exp() - one));
            }
            Op::KlBernoulli { q, prior } => {
                let qv = val(*q);
                let p = *prior;
                self.elementwise(grads, *q, g, |k, gv| {
                    let x = qv[k];
                    gv * (x * (one - p) / (p * (one - x))).ln()
                });
            }
            Op::CellMse { a, b, weights, cell } => {
                let s = self.nodes[*a].value.shape().to_vec();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ch, cw) = (h / cell, w / cell);
                let av = val(*a);
                let bv = val(*b);
                let scale = g.data()[0] * T::lit(2.0) / T::from_usize(cell * cell * c * n).unwrap();
                let wd = weights.data();
                let mut da = vec![T::zero(); av.len()];
                for bi in 0..n {
                    for yy in 0..h {
                        for xx in 0..w {
                            let wt = wd[(bi * ch + yy / cell) * cw + xx / cell] * scale;
                            let base = ((bi * h + yy) * w + xx) * c;
                            for k in base..base + c {
                                da[k] = wt * (av[k] - bv[k]);
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(s.clone(), db)?);
                }
                self.accumulate(grads, *a, Tensor::from_vec(s, da)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g.data()[0] / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= one;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::from_vec(self.nodes[*logits].value.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }

    fn elementwise_const(&self, grads: &mut [Option<Tensor<T>>], i: usize, v: T) {
        if self.rg(i) {
            let shape = self.nodes[i].value.shape();
            self.accumulate(grads, i, Tensor::full(shape, v));
        }
    }
}

/// Source of normalization moments for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BatchNormStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients from [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    requires: Vec<bool>,
    params: IndexMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf. Leaves the loss does not
    /// depend on get zeros; values that never required grad are an error.
    pub fn wrt(&self, v: Var, shape_hint: &[usize]) -> Result<Tensor<T>> {
        if !self.requires.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Detached(v.0));
        }
        Ok(self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(shape_hint)))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter used in the graph, by name.
    pub fn param_grads(&self) -> IndexMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(_, &i)| self.requires[i])
            .filter_map(|(name, &i)| self.grads[i].clone().map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&i| self.grads[i].as_ref())
    }
}
