//! Reparameterizable latents: diagonal Gaussian and relaxed Bernoulli.
//!
//! Every sampler takes its noise explicitly so calls are pure and can be
//! replayed. The `*_var` variants record the same computation on a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;
/// Log-variances are kept inside `[-LOGVAR_LIMIT, LOGVAR_LIMIT]`.
pub const LOGVAR_LIMIT: f64 = 10.0;
/// Eval-time occurrence threshold.
pub const HARDEN_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Scalar> GaussianParams<T> {
    /// Shapes must match; `logvar` is clamped.
    pub fn new(mu: Tensor<T>, logvar: Tensor<T>) -> Result<Self> {
        if mu.shape() != logvar.shape() {
            return Err(Error::shape("GaussianParams", mu.shape(), logvar.shape()));
        }
        let lim = T::lit(LOGVAR_LIMIT);
        let logvar = logvar.map(|v| v.max(-lim).min(lim));
        Ok(Self { mu, logvar })
    }

    pub fn standard(shape: &[usize]) -> Self {
        Self {
            mu: Tensor::zeros(shape),
            logvar: Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliParams<T> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> BernoulliParams<T> {
    pub fn new(probs: Tensor<T>) -> Self {
        Self {
            probs: probs.map(clamp_prob),
        }
    }
}

#[inline]
pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    let p = clamp_prob(p);
    (p / (T::one() - p)).ln()
}

/// `mu + exp(logvar / 2) * noise`.
pub fn sample_gaussian<T: Scalar>(params: &GaussianParams<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    if noise.shape() != params.mu.shape() {
        return Err(Error::shape("sample_gaussian noise", params.mu.shape(), noise.shape()));
    }
    let half = T::lit(0.5);
    let std = params.logvar.map(|lv| (lv * half).exp());
    let scaled = std.zip_map(noise, |s, n| s * n)?;
    params.mu.zip_map(&scaled, |m, s| m + s)
}

pub fn sample_gaussian_var<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var, noise: Tensor<T>) -> Result<Var> {
    if noise.shape() != g.shape(mu) {
        return Err(Error::shape("sample_gaussian noise", g.shape(mu), noise.shape()));
    }
    let half = g.scale(logvar, T::lit(0.5));
    let std = g.exp(half);
    let n = g.constant(noise);
    let scaled = g.mul(std, n)?;
    g.add(mu, scaled)
}

/// Elementwise `KL(N(mu, sigma^2) || N(0, 1))`.
pub fn kl_gaussian_elementwise<T: Scalar>(params: &GaussianParams<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    params
        .mu
        .zip_map(&params.logvar, |m, lv| -half * (T::one() + lv - m * m - lv.exp()))
        .expect("shapes validated at construction")
}

/// `-1/2 * sum(1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_gaussian_std<T: Scalar>(params: &GaussianParams<T>) -> T {
    kl_gaussian_elementwise(params).sum()
}

/// `q ln(q/p) + (1-q) ln((1-q)/(1-p))` at every location.
pub fn kl_bernoulli<T: Scalar>(q: &BernoulliParams<T>, prior: T) -> Result<Tensor<T>> {
    if !(prior > T::zero() && prior < T::one()) {
        return Err(Error::Config(format!("Bernoulli prior must lie in (0, 1), got {prior}")));
    }
    let one = T::one();
    Ok(q.probs
        .map(|q| q * (q / prior).ln() + (one - q) * ((one - q) / (one - prior)).ln()))
}

/// `sigmoid((logit(q) + logit(u)) / tau)`.
pub fn sample_relaxed_bernoulli<T: Scalar>(q: &BernoulliParams<T>, tau: T, uniform: &Tensor<T>) -> Result<Tensor<T>> {
    if uniform.shape() != q.probs.shape() {
        return Err(Error::shape("relaxed bernoulli noise", q.probs.shape(), uniform.shape()));
    }
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    q.probs.zip_map(uniform, |p, u| sigmoid((logit(p) + logit(u)) / tau))
}

/// Graph version of [`sample_relaxed_bernoulli`]; differentiable in `q`.
pub fn sample_relaxed_bernoulli_var<T: Scalar>(g: &mut Graph<T>, q: Var, tau: T, uniform: &Tensor<T>) -> Result<Var> {
    if uniform.shape() != g.shape(q) {
        return Err(Error::shape("relaxed bernoulli noise", g.shape(q), uniform.shape()));
    }
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let lq = g.logit(q, T::lit(PROB_EPS));
    let lu = g.constant(uniform.map(logit));
    let s = g.add(lq, lu)?;
    let s = g.scale(s, T::one() / tau);
    Ok(g.sigmoid(s))
}

/// 1 where `q > threshold`, else 0. Ties go to 0.
pub fn harden<T: Scalar>(q: &Tensor<T>, threshold: T) -> Tensor<T> {
    q.map(|p| if p > threshold { T::one() } else { T::zero() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleForm {
    /// `tau0 * exp(-rate * step)`
    Exponential,
    /// `tau0 - rate * step`
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub rate: f64,
    pub tau_min: f64,
    pub form: ScheduleForm,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            rate: 3e-5,
            tau_min: 0.4,
            form: ScheduleForm::Exponential,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.rate >= 0.0 && self.tau_min > 0.0) {
            return Err(Error::Config(format!("invalid temperature schedule {self:?}")));
        }
        Ok(())
    }
}

/// Relaxation temperature at a global step, floored at `tau_min`.
pub fn temperature_at(schedule: &TemperatureSchedule, step: u64) -> f64 {
    let raw = match schedule.form {
        ScheduleForm::Exponential => schedule.tau0 * (-schedule.rate * step as f64).exp(),
        ScheduleForm::Linear => schedule.tau0 - schedule.rate * step as f64,
    };
    raw.max(schedule.tau_min)
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

/// Uniform noise on the open interval (0, 1).
pub fn uniform_open<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = Open01.sample(rng);
        T::lit(v)
    })
}
