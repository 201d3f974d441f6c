//! Analytic noise-prediction oracles.
//!
//! For data drawn from a diagonal Gaussian mixture the diffused density at
//! noise level `t` is again a mixture, with each component variance widened
//! by `t^2`. The exact noise prediction is `eps(x, t) = -t * grad log p(x; t)`,
//! so any error a solver shows against these oracles is pure truncation error.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::State;

/// A noise-prediction model `eps(x, t)`.
///
/// Implementations must be pure: the same `(x, t)` always yields the same
/// output, and evaluation is safe from any number of threads.
pub trait NoiseOracle: Sync {
    fn dim(&self) -> usize;

    fn noise(&self, x: &[f64], t: f64) -> Result<State>;
}

impl<T: NoiseOracle + ?Sized> NoiseOracle for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn noise(&self, x: &[f64], t: f64) -> Result<State> {
        (**self).noise(x, t)
    }
}

impl<T: NoiseOracle + ?Sized> NoiseOracle for alloc::boxed::Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn noise(&self, x: &[f64], t: f64) -> Result<State> {
        (**self).noise(x, t)
    }
}

/// One diagonal-covariance mixture component.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Unvalidated mixture description, as stored in model files.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<Component>,
}

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    log_weights: Vec<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GaussianMixture {
    pub fn new(dim: usize, components: Vec<Component>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMixture("dim must be positive".into()));
        }
        if components.is_empty() {
            return Err(Error::InvalidMixture("at least one component required".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: weight {} must be positive",
                    c.weight
                )));
            }
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: mean/var length must equal dim {dim}"
                )));
            }
            if c.var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: variances must be positive"
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {i}: mean must be finite"
                )));
            }
            total += c.weight;
        }
        if libm::fabs(total - 1.0) > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let log_weights = components.iter().map(|c| libm::log(c.weight)).collect();
        Ok(Self {
            dim,
            components,
            log_weights,
        })
    }

    /// A single Gaussian `N(mean, diag(var))`.
    pub fn single(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            dim,
            vec![Component {
                weight: 1.0,
                mean,
                var,
            }],
        )
    }

    /// The default 2-D, 3-component test model.
    pub fn default_2d() -> Self {
        let components = vec![
            Component {
                weight: 0.5,
                mean: vec![-1.5, 0.0],
                var: vec![0.1, 0.2],
            },
            Component {
                weight: 0.3,
                mean: vec![1.5, 1.0],
                var: vec![0.2, 0.1],
            },
            Component {
                weight: 0.2,
                mean: vec![0.5, -1.5],
                var: vec![0.15, 0.15],
            },
        ];
        Self::new(2, components).expect("default mixture is valid")
    }

    pub fn spec(&self) -> MixtureSpec {
        MixtureSpec {
            dim: self.dim,
            components: self.components.clone(),
        }
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    fn check(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !(t > 0.0) {
            return Err(Error::NonPositiveTime(t));
        }
        Ok(())
    }

    fn component_log_density(&self, c: &Component, x: &[f64], t2: f64) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), vi) in x.iter().zip(&c.mean).zip(&c.var) {
            let s = vi + t2;
            let d = xi - mi;
            acc += libm::log(s) + d * d / s;
        }
        -0.5 * (acc + self.dim as f64 * LN_2PI)
    }

    /// Joint log terms `log w_i + log N_i(x; t)` and their log-sum-exp.
    fn log_terms(&self, x: &[f64], t: f64) -> (Vec<f64>, f64) {
        let t2 = t * t;
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + self.component_log_density(c, x, t2))
            .collect();
        let lse = log_sum_exp(&terms);
        (terms, lse)
    }

    /// Log-density of the diffused distribution `p(x; t)`.
    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check(x, t)?;
        Ok(self.log_terms(x, t).1)
    }

    /// Posterior component responsibilities at `(x, t)`.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x, t)?;
        let (terms, _) = self.log_terms(x, t);
        // Normalise relative to the largest term so the weights sum to one
        // even when the log terms are huge.
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = terms.iter().map(|l| libm::exp(l - max)).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.iter().map(|e| e / sum).collect())
    }

    /// `grad_x log p(x; t)`.
    pub fn score(&self, x: &[f64], t: f64) -> Result<State> {
        let gamma = self.responsibilities(x, t)?;
        let t2 = t * t;
        let mut out = vec![0.0; self.dim];
        for (c, g) in self.components.iter().zip(&gamma) {
            for (j, o) in out.iter_mut().enumerate() {
                *o += g * (c.mean[j] - x[j]) / (c.var[j] + t2);
            }
        }
        Ok(out)
    }

    /// `eps(x, t) = -t * score(x, t)`.
    pub fn noise_prediction(&self, x: &[f64], t: f64) -> Result<State> {
        let mut s = self.score(x, t)?;
        for v in &mut s {
            *v *= -t;
        }
        Ok(s)
    }
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        Self::new(spec.dim, spec.components)
    }
}

impl NoiseOracle for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise(&self, x: &[f64], t: f64) -> Result<State> {
        self.noise_prediction(x, t)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|l| libm::exp(l - max)).sum();
    max + libm::log(sum)
}

/// Exact flow of `dx/dt = eps(x, t)` for a single diagonal Gaussian.
pub fn closed_form_flow(
    mean: &[f64],
    var: &[f64],
    x: &[f64],
    t_from: f64,
    t_to: f64,
) -> Result<State> {
    if !(t_from > 0.0) {
        return Err(Error::NonPositiveTime(t_from));
    }
    if !(t_to > 0.0) {
        return Err(Error::NonPositiveTime(t_to));
    }
    if mean.len() != x.len() || var.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: mean.len().min(var.len()),
        });
    }
    let (a2, b2) = (t_to * t_to, t_from * t_from);
    Ok(x.iter()
        .zip(mean)
        .zip(var)
        .map(|((xi, mi), vi)| mi + (xi - mi) * libm::sqrt((vi + a2) / (vi + b2)))
        .collect())
}

/// Draws `count` i.i.d. `N(0, t_max^2 I)` starting states.
pub fn sample_initial<R: Rng + ?Sized>(
    rng: &mut R,
    t_max: f64,
    dim: usize,
    count: usize,
) -> Result<Vec<State>> {
    if !(t_max > 0.0) {
        return Err(Error::NonPositiveTime(t_max));
    }
    if dim == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    Ok((0..count)
        .map(|_| {
            (0..dim)
                .map(|_| t_max * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect())
}

/// Wraps an oracle and counts how many evaluations were issued.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O: NoiseOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<O: NoiseOracle> NoiseOracle for CountingOracle<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn noise(&self, x: &[f64], t: f64) -> Result<State> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.noise(x, t)
    }
}

/// Oracle returning the same direction everywhere.
#[derive(Debug, Clone)]
pub struct ConstantOracle(pub State);

impl NoiseOracle for ConstantOracle {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn noise(&self, x: &[f64], _t: f64) -> Result<State> {
        if x.len() != self.0.len() {
            return Err(Error::DimensionMismatch {
                expected: self.0.len(),
                got: x.len(),
            });
        }
        Ok(self.0.clone())
    }
}
