//! Layer stacks in the `(kernel x kernel, channels, stride, pad)` notation.

use std::fmt;

use rand::Rng;

use super::graph::{BatchNormStats, Graph, Var};
use super::params::{fan_in_uniform, ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batchnorm behaviour. Always passed explicitly, never inferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; a deterministic affine map.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub const fn new(kernel: usize, channels: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            channels,
            stride,
            pad,
            bias: false,
        }
    }

    pub const fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({k}x{k}, {}, {}, {})",
            self.channels,
            self.stride,
            self.pad,
            k = self.kernel
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    Deconv(ConvSpec),
    BatchNorm,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    /// Flattens its input; carries a bias.
    FullyConnected { units: usize },
    MaxPool { kernel: usize, stride: usize, pad: usize },
    /// conv-BN-ReLU-conv-BN plus shortcut, then ReLU. The stride is applied
    /// by the second conv; a 1x1 conv + BN projects the shortcut whenever the
    /// channel count or resolution changes.
    Residual { channels: usize, stride: usize },
}

/// Per-sample shape `[h, w, c]` (or `[features]` after a fully-connected layer).
pub type SampleShape = Vec<usize>;

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub in_shape: SampleShape,
    pub out_shape: SampleShape,
}

fn conv_out(len: usize, s: &ConvSpec) -> Result<usize> {
    let padded = len + 2 * s.pad;
    if padded < s.kernel {
        return Err(Error::Config(format!("conv {s} does not fit input extent {len}")));
    }
    Ok((padded - s.kernel) / s.stride + 1)
}

fn deconv_out(len: usize, s: &ConvSpec) -> Result<usize> {
    let full = (len - 1) * s.stride + s.kernel;
    if full <= 2 * s.pad {
        return Err(Error::Config(format!("deconv {s} yields empty output")));
    }
    Ok(full - 2 * s.pad)
}

fn spatial(shape: &[usize], name: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::shape(name, &[0, 0, 0], shape)),
    }
}

impl Layer {
    fn infer(name: &str, kind: &LayerKind, input: &[usize]) -> Result<SampleShape> {
        Ok(match kind {
            LayerKind::Conv(s) => {
                let (h, w, _) = spatial(input, name)?;
                vec![conv_out(h, s)?, conv_out(w, s)?, s.channels]
            }
            LayerKind::Deconv(s) => {
                let (h, w, _) = spatial(input, name)?;
                vec![deconv_out(h, s)?, deconv_out(w, s)?, s.channels]
            }
            LayerKind::MaxPool { kernel, stride, pad } => {
                let (h, w, c) = spatial(input, name)?;
                let s = ConvSpec::new(*kernel, c, *stride, *pad);
                vec![conv_out(h, &s)?, conv_out(w, &s)?, c]
            }
            LayerKind::Residual { channels, stride } => {
                let (h, w, _) = spatial(input, name)?;
                let s = ConvSpec::new(3, *channels, *stride, 1);
                vec![conv_out(h, &s)?, conv_out(w, &s)?, *channels]
            }
            LayerKind::FullyConnected { units } => vec![*units],
            _ => input.to_vec(),
        })
    }

    fn init_conv<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        s: &ConvSpec,
        rng: &mut R,
    ) {
        let k = s.kernel;
        store.insert(
            format!("{prefix}.weight"),
            fan_in_uniform(&[k, k, cin, s.channels], k * k * cin, rng),
            ParamRole::Learnable,
        );
        if s.bias {
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[s.channels]), ParamRole::Learnable);
        }
    }

    fn init_bn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
        store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()), ParamRole::Learnable);
        store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), ParamRole::Learnable);
        store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), ParamRole::Buffer);
        store.insert(format!("{prefix}.running_var"), Tensor::full(&[c], T::one()), ParamRole::Buffer);
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let cin = *self.in_shape.last().unwrap();
        let p = &self.name;
        match &self.kind {
            LayerKind::Conv(s) => Self::init_conv(store, p, cin, s, rng),
            LayerKind::Deconv(s) => {
                let k = s.kernel;
                // Each output pixel collects about cin * k^2 / stride^2 taps.
                let fan_in = (cin * k * k / (s.stride * s.stride)).max(1);
                store.insert(
                    format!("{p}.weight"),
                    fan_in_uniform(&[cin, k, k, s.channels], fan_in, rng),
                    ParamRole::Learnable,
                );
                if s.bias {
                    store.insert(format!("{p}.bias"), Tensor::zeros(&[s.channels]), ParamRole::Learnable);
                }
            }
            LayerKind::BatchNorm => Self::init_bn(store, p, cin),
            LayerKind::FullyConnected { units } => {
                let fin: usize = self.in_shape.iter().product();
                store.insert(format!("{p}.weight"), fan_in_uniform(&[fin, *units], fin, rng), ParamRole::Learnable);
                store.insert(format!("{p}.bias"), Tensor::zeros(&[*units]), ParamRole::Learnable);
            }
            LayerKind::Residual { channels, stride } => {
                let c = *channels;
                Self::init_conv(store, &format!("{p}.conv1"), cin, &ConvSpec::new(3, c, 1, 1), rng);
                Self::init_bn(store, &format!("{p}.bn1"), c);
                Self::init_conv(store, &format!("{p}.conv2"), c, &ConvSpec::new(3, c, *stride, 1), rng);
                Self::init_bn(store, &format!("{p}.bn2"), c);
                if cin != c || *stride != 1 {
                    Self::init_conv(store, &format!("{p}.proj"), cin, &ConvSpec::new(1, c, *stride, 0), rng);
                    Self::init_bn(store, &format!("{p}.proj_bn"), c);
                }
            }
            _ => {}
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let got = &g.shape(x)[1..];
        if got != self.in_shape.as_slice() {
            return Err(Error::Shape {
                context: format!("layer {} ({:?})", self.name, self.kind),
                expected: self.in_shape.clone(),
                actual: got.to_vec(),
            });
        }
        let p = &self.name;
        match &self.kind {
            LayerKind::Conv(s) => conv(g, store, p, x, s),
            LayerKind::Deconv(s) => {
                let w = g.param(store, &format!("{p}.weight"))?;
                let b = s.bias.then(|| g.param(store, &format!("{p}.bias"))).transpose()?;
                g.conv_transpose2d(x, w, b, s.stride, s.pad)
            }
            LayerKind::BatchNorm => batch_norm(g, store, p, x, mode),
            LayerKind::Relu => Ok(g.relu(x)),
            LayerKind::LeakyRelu(slope) => Ok(g.leaky_relu(x, T::lit(*slope))),
            LayerKind::Tanh => Ok(g.tanh(x)),
            LayerKind::Sigmoid => Ok(g.sigmoid(x)),
            LayerKind::FullyConnected { .. } => {
                let w = g.param(store, &format!("{p}.weight"))?;
                let b = g.param(store, &format!("{p}.bias"))?;
                g.linear(x, w, Some(b))
            }
            LayerKind::MaxPool { kernel, stride, pad } => g.max_pool2d(x, *kernel, *stride, *pad),
            LayerKind::Residual { channels, stride } => {
                let c = *channels;
                let h = conv(g, store, &format!("{p}.conv1"), x, &ConvSpec::new(3, c, 1, 1))?;
                let h = batch_norm(g, store, &format!("{p}.bn1"), h, mode)?;
                let h = g.relu(h);
                let h = conv(g, store, &format!("{p}.conv2"), h, &ConvSpec::new(3, c, *stride, 1))?;
                let h = batch_norm(g, store, &format!("{p}.bn2"), h, mode)?;
                let shortcut = if store.contains(&format!("{p}.proj.weight")) {
                    let s = conv(g, store, &format!("{p}.proj"), x, &ConvSpec::new(1, c, *stride, 0))?;
                    batch_norm(g, store, &format!("{p}.proj_bn"), s, mode)?
                } else {
                    x
                };
                let sum = g.add(h, shortcut)?;
                Ok(g.relu(sum))
            }
        }
    }
}

fn conv<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &str, x: Var, s: &ConvSpec) -> Result<Var> {
    let w = g.param(store, &format!("{p}.weight"))?;
    let b = s.bias.then(|| g.param(store, &format!("{p}.bias"))).transpose()?;
    g.conv2d(x, w, b, s.stride, s.pad)
}

fn batch_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &str, x: Var, mode: Mode) -> Result<Var> {
    let gamma = g.param(store, &format!("{p}.gamma"))?;
    let beta = g.param(store, &format!("{p}.beta"))?;
    let rm_name = format!("{p}.running_mean");
    let rv_name = format!("{p}.running_var");
    let eps = T::lit(BN_EPS);
    match mode {
        Mode::Eval => {
            let stats = BatchNormStats::Running {
                mean: store.tensor(&rm_name)?.data(),
                var: store.tensor(&rv_name)?.data(),
            };
            Ok(g.batch_norm(x, gamma, beta, eps, stats)?.0)
        }
        Mode::Train => {
            let (y, moments) = g.batch_norm(x, gamma, beta, eps, BatchNormStats::Batch)?;
            let (mean, var) = moments.expect("batch moments");
            let count = g.value(x).numel() / mean.len();
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            let m = T::lit(BN_MOMENTUM);
            let keep = T::one() - m;
            let rm = store.tensor(&rm_name)?.data();
            let rv = store.tensor(&rv_name)?.data();
            let new_mean: Vec<T> = rm.iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect();
            let new_var: Vec<T> = rv.iter().zip(&var).map(|(&r, &b)| keep * r + m * b * unbias).collect();
            let c = mean.len();
            g.record_stat_update(rm_name, Tensor::from_vec(vec![c], new_mean)?);
            g.record_stat_update(rv_name, Tensor::from_vec(vec![c], new_var)?);
            Ok(y)
        }
    }
}

/// An ordered stack of layers with shapes resolved at construction.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub prefix: String,
    pub layers: Vec<Layer>,
}

impl LayerStack {
    /// Resolve shapes for `kinds` applied to per-sample `input` and register
    /// each layer's parameters under `{prefix}.{index}`.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        prefix: &str,
        input: &[usize],
        kinds: Vec<LayerKind>,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input.to_vec();
        let mut layers = Vec::with_capacity(kinds.len());
        for (i, kind) in kinds.into_iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let out = Layer::infer(&name, &kind, &shape)?;
            let layer = Layer {
                name,
                kind,
                in_shape: shape,
                out_shape: out.clone(),
            };
            layer.init(store, rng);
            layers.push(layer);
            shape = out;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            layers,
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        self.layers.first().map(|l| l.in_shape.as_slice()).unwrap_or(&[])
    }

    pub fn out_shape(&self) -> &[usize] {
        self.layers.last().map(|l| l.out_shape.as_slice()).unwrap_or(&[])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward_range(g, store, x, 0..self.layers.len(), mode)
    }

    /// Run layers `range` only.
    pub fn forward_range<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        range: std::ops::Range<usize>,
        mode: Mode,
    ) -> Result<Var> {
        for layer in &self.layers[range] {
            x = layer.forward(g, store, x, mode)?;
        }
        Ok(x)
    }

    pub fn layer_prefix(&self, index: usize) -> String {
        format!("{}.{}", self.prefix, index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stack_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = LayerStack::build("id", &[4, 4, 3], vec![], &mut store, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 4, 4, 3], |i| (i as f32 * 0.1).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = stack.forward(&mut g, &store, xv, Mode::Eval).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn unit_pointwise_conv_preserves_constant_map() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = LayerStack::build(
            "c",
            &[3, 3, 1],
            vec![LayerKind::Conv(ConvSpec::new(1, 1, 1, 0).with_bias())],
            &mut store,
            &mut rng,
        )
        .unwrap();
        *store.tensor_mut("c.0.weight").unwrap() = Tensor::full(&[1, 1, 1, 1], 1.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3, 1], 0.75));
        let y = stack.forward(&mut g, &store, x, Mode::Eval).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = LayerStack::build(
            "net",
            &[8, 8, 3],
            vec![LayerKind::Conv(ConvSpec::new(3, 4, 1, 1)), LayerKind::Relu],
            &mut store,
            &mut rng,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 8, 8, 5]));
        let err = stack.forward(&mut g, &store, x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("net.0"), "{err}");
    }

    #[test]
    fn eval_batchnorm_is_deterministic_affine() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = LayerStack::build("bn", &[2, 2, 2], vec![LayerKind::BatchNorm], &mut store, &mut rng).unwrap();
        *store.tensor_mut("bn.0.running_mean").unwrap() = Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
        *store.tensor_mut("bn.0.running_var").unwrap() = Tensor::from_vec(vec![2], vec![4.0, 0.25]).unwrap();
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = stack.forward(&mut g, &store, xv, Mode::Eval).unwrap();
            assert!(g.take_stat_updates().is_empty());
            g.value(y).clone()
        };
        let y = run(&x);
        assert_eq!(y, run(&x));
        for (i, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
            let (m, v) = if i % 2 == 0 { (1.0, 4.0) } else { (-1.0, 0.25) };
            assert!((yi - (xi - m) / (v + BN_EPS).sqrt()).abs() < 1e-12);
        }
    }
}
