use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update of a single array, in place. `t` is the
/// 1-based step count.
pub fn adam_step<T: Scalar>(hyper: &AdamHyper, t: u64, param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T]) {
    assert!(t >= 1, "adam step count starts at 1");
    assert!(param.len() == grad.len() && grad.len() == m.len() && m.len() == v.len());
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bias1 = T::lit(1.0 - hyper.beta1.powi(t as i32));
    let bias2 = T::lit(1.0 - hyper.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(hyper.lr), T::lit(hyper.eps));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
        let mhat = m[i] / bias1;
        let vhat = v[i] / bias2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// First and second moments per parameter name, plus the step count.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Advance the step count and update every parameter that has a gradient.
    pub fn update(&mut self, hyper: &AdamHyper, store: &mut ParamStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            let p = store.tensor_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient of {name}"), p.shape(), g.shape()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            adam_step(hyper, self.t, p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook update written out independently.
    fn reference(p: f64, g: f64, m: f64, v: f64, t: i32, h: &AdamHyper) -> (f64, f64, f64) {
        let m = h.beta1 * m + (1.0 - h.beta1) * g;
        let v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        let mh = m / (1.0 - h.beta1.powi(t));
        let vh = v / (1.0 - h.beta2.powi(t));
        (p - h.lr * mh / (vh.sqrt() + h.eps), m, v)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let h = AdamHyper::default();
        let (mut p, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
        adam_step(&h, 1, &mut p, &[1.0], &mut m, &mut v);
        assert!((p[0] - (0.5 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_over_several_steps() {
        let h = AdamHyper {
            lr: 3e-3,
            ..AdamHyper::default()
        };
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7];
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        let (mut rp, mut rm, mut rv) = (1.0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&h, t as u64 + 1, &mut p, &[g], &mut m, &mut v);
            (rp, rm, rv) = reference(rp, g, rm, rv, t as i32 + 1, &h);
            assert!((p[0] - rp).abs() < 1e-14 && (m[0] - rm).abs() < 1e-15 && (v[0] - rv).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_keeps_param_and_decays_moments() {
        let h = AdamHyper::default();
        let (mut p, mut m, mut v) = ([2.0f32], [0.4f32], [0.3f32]);
        adam_step(&h, 5, &mut p, &[0.0], &mut m, &mut v);
        assert!((m[0] - 0.36).abs() < 1e-7);
        assert!((v[0] - 0.2997).abs() < 1e-7);
        assert!(p[0] < 2.0, "momentum still moves the parameter");

        let (mut p, mut m, mut v) = ([2.0f32], [0.0f32], [0.0f32]);
        adam_step(&h, 1, &mut p, &[0.0], &mut m, &mut v);
        assert_eq!((p[0], m[0], v[0]), (2.0, 0.0, 0.0));
    }

    #[test]
    fn update_is_pure_in_its_inputs() {
        let h = AdamHyper::default();
        let run = || {
            let (mut p, mut m, mut v) = (vec![0.1f32, -0.2], vec![0.01, 0.0], vec![0.001, 0.0]);
            adam_step(&h, 3, &mut p, &[0.5, -0.25], &mut m, &mut v);
            (p, m, v)
        };
        assert_eq!(run(), run());
    }
}
