//! Gradient certification of every layer kind and of both objectives on a
//! miniature configuration, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::ReconKind;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::{finite_difference_check, ConvSpec, GradCheckConfig, GradCheckReport, LayerKind, LayerStack, Mode, ParamRole, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::objective_vars;

/// Name of the input treated as a parameter in layer checks.
pub const INPUT_PARAM: &str = "input";

#[derive(Clone, Debug)]
pub struct CertifiedCase {
    pub name: String,
    pub report: GradCheckReport,
}

/// One representative of every layer kind, with its per-sample input shape.
pub fn layer_cases() -> Vec<(&'static str, Vec<usize>, LayerKind)> {
    let img = vec![6, 6, 3];
    vec![
        ("conv", img.clone(), LayerKind::Conv(ConvSpec::new(3, 4, 2, 1).with_bias())),
        ("conv_nobias", img.clone(), LayerKind::Conv(ConvSpec::new(1, 2, 1, 0))),
        ("deconv", img.clone(), LayerKind::Deconv(ConvSpec::new(4, 4, 2, 1).with_bias())),
        ("deconv_1x1", img.clone(), LayerKind::Deconv(ConvSpec::new(1, 5, 1, 0))),
        ("batchnorm", img.clone(), LayerKind::BatchNorm),
        ("relu", img.clone(), LayerKind::Relu),
        ("leaky_relu", img.clone(), LayerKind::LeakyRelu(0.2)),
        ("tanh", img.clone(), LayerKind::Tanh),
        ("sigmoid", img.clone(), LayerKind::Sigmoid),
        ("fully_connected", img.clone(), LayerKind::FullyConnected { units: 5 }),
        (
            "maxpool",
            img.clone(),
            LayerKind::MaxPool {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
        ),
        ("residual_identity", img.clone(), LayerKind::Residual { channels: 3, stride: 1 }),
        ("residual_projection", img, LayerKind::Residual { channels: 4, stride: 2 }),
    ]
}

/// Values bounded away from zero so no kink sits within a difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Certify `sum(layer(input) * r)` for a fixed random `r` with respect to
/// the layer's parameters and its input.
pub fn check_layer(in_shape: &[usize], kind: LayerKind, batch: usize, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stack = LayerStack::build("layer", in_shape, vec![kind], &mut store, &mut rng)?;
    let mut x_shape = vec![batch];
    x_shape.extend_from_slice(in_shape);
    store.insert(INPUT_PARAM, away_from_zero(&x_shape, &mut rng), ParamRole::Learnable);
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(stack.out_shape());
    let r = away_from_zero(&out_shape, &mut rng);
    finite_difference_check(
        &mut store,
        |g, store| {
            let x = g.param(store, INPUT_PARAM)?;
            let y = stack.forward(g, store, x, Mode::Train)?;
            let rv = g.constant(r.clone());
            let prod = g.mul(y, rv)?;
            Ok(g.sum_all(prod))
        },
        cfg,
    )
}

/// Certify the full training objective of `config` with captured noise.
pub fn check_objective(config: &ModelConfig, kind: ReconKind, seed: u64, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let (model, mut store) = Model::build::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let batch = 2;
    let x = Tensor::from_fn(&[batch, config.height, config.width, 3], |_| rng.random_range(-1.0..1.0));
    let noise = model.draw_noise::<f64, _>(batch, &mut rng);
    finite_difference_check(
        &mut store,
        |g, store| Ok(objective_vars(&model, g, store, &x, Some(&noise), 0.7, Mode::Train, kind)?.total),
        cfg,
    )
}

/// Every layer kind, then both objectives with both reconstruction losses.
pub fn certification_suite(cfg: GradCheckConfig) -> Result<Vec<CertifiedCase>> {
    let mut out = Vec::new();
    for (i, (name, shape, kind)) in layer_cases().into_iter().enumerate() {
        out.push(CertifiedCase {
            name: format!("layer/{name}"),
            report: check_layer(&shape, kind, 2, i as u64, cfg)?,
        });
    }
    let patch = ModelConfig::miniature();
    let beta = ModelConfig {
        kind: ModelKind::BetaVae,
        z_dim: 3,
        bottleneck_channels: 4,
        ..ModelConfig::miniature()
    };
    for (label, mc) in [("patchvae", &patch), ("betavae", &beta)] {
        for kind in [ReconKind::Plain, ReconKind::Weighted] {
            out.push(CertifiedCase {
                name: format!("objective/{label}/{}", kind.name()),
                report: check_objective(mc, kind, 11, cfg)?,
            });
        }
    }
    Ok(out)
}
