//! Central finite-difference certification of analytic gradients.

use indexmap::IndexMap;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Symmetric difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor so that vanishing gradients compare absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_error < self.tolerance))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(store: &ParamStore<f64>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.scalar_value(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("finite-difference probe produced loss {v}")));
    }
    Ok(v)
}

/// Analytic gradients of every trainable parameter (zeros for unused ones).
pub fn analytic_gradients<F>(store: &ParamStore<f64>, loss_fn: &mut F) -> Result<IndexMap<String, Tensor<f64>>>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.scalar_value(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss is {v} before gradient check")));
    }
    let grads = g.backward(loss)?;
    let mut out = IndexMap::new();
    for name in store.trainable_names() {
        let t = match grads.param(&name) {
            Some(t) => t.clone(),
            None => Tensor::zeros(store.tensor(&name)?.shape()),
        };
        out.insert(name, t);
    }
    Ok(out)
}

/// Compare `analytic` against central differences of `loss_fn` for every
/// trainable scalar in `store`. The store is restored before returning.
pub fn compare_with_finite_differences<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    analytic: &IndexMap<String, Tensor<f64>>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut params = Vec::new();
    for name in store.trainable_names() {
        let numel = store.tensor(&name)?.numel();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Index(format!("no analytic gradient for {name}")))?;
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..numel {
            let orig = store.tensor(&name)?.data()[k];
            store.tensor_mut(&name)?.data_mut()[k] = orig + cfg.step;
            let plus = eval_loss(store, &mut loss_fn);
            store.tensor_mut(&name)?.data_mut()[k] = orig - cfg.step;
            let minus = eval_loss(store, &mut loss_fn);
            store.tensor_mut(&name)?.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let a = grad.data()[k];
            let err = relative_error(a, numeric, cfg.floor);
            if err > worst.max_rel_error || err.is_nan() {
                worst.max_rel_error = err;
                worst.worst_index = k;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        params.push(worst);
    }
    let passed = params.iter().all(|p| p.max_rel_error < cfg.tolerance);
    Ok(GradCheckReport {
        params,
        tolerance: cfg.tolerance,
        passed,
    })
}

/// Certify a loss closure's gradients over every trainable parameter.
///
/// The closure must be deterministic: any noise has to be captured, not drawn.
pub fn finite_difference_check<F>(store: &mut ParamStore<f64>, mut loss_fn: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut loss_fn)?;
    compare_with_finite_differences(store, loss_fn, &analytic, cfg)
}
