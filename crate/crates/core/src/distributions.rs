//! Probability terms of the evidence lower bounds and the two
//! reparametrized samplers.
//!
//! Every function records onto a [`Graph`] so the terms can be differentiated
//! end to end. Noise is drawn up front into [`GumbelNoise`] / [`GaussianNoise`]
//! and passed in, which keeps each sampler a deterministic function of its
//! parameters once the noise is fixed.

use crate::diffmath::{DiffError, Graph, RngState, Tensor, Var, EPS_CLAMP};
use crate::scalar::Scalar;

/// Gumbel-softmax temperature.
pub const DEFAULT_TAU: f64 = 0.1;

/// Tolerance on row sums when a tensor must lie on the probability simplex.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error(transparent)]
    Shape(#[from] DiffError),
    #[error("row {row} sums to {sum}, not 1")]
    NotOnSimplex { row: usize, sum: f64 },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

/// Standard Gumbel draws, `-log(-log(u))` with `u` uniform on (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise<T> {
    pub eps: Tensor<T>,
}

impl<T: Scalar> GumbelNoise<T> {
    pub fn draw(rows: usize, cols: usize, rng: &mut RngState) -> Self {
        let eps = Tensor::from_fn(rows, cols, |_, _| {
            let u = rng.open01().clamp(1e-12, 1.0 - 1e-12);
            T::lit(-(-u.ln()).ln())
        });
        Self { eps }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            eps: Tensor::zeros(&[rows, cols]),
        }
    }
}

/// Standard normal draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNoise<T> {
    pub eps: Tensor<T>,
}

impl<T: Scalar> GaussianNoise<T> {
    pub fn draw(rows: usize, cols: usize, rng: &mut RngState) -> Self {
        let eps = Tensor::from_fn(rows, cols, |_, _| T::lit(rng.standard_normal()));
        Self { eps }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            eps: Tensor::zeros(&[rows, cols]),
        }
    }
}

/// Checks every row of `pi` sums to one within [`SIMPLEX_TOLERANCE`].
pub fn check_simplex<T: Scalar>(pi: &Tensor<T>) -> Result<(), DistError> {
    for r in 0..pi.rows() {
        let sum: f64 = pi.row(r).iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || !sum.is_finite() {
            return Err(DistError::NotOnSimplex { row: r, sum });
        }
    }
    Ok(())
}

/// `sum x log w + (1 - x) log(1 - w)` with `w` clamped to `[eps, 1 - eps]`.
pub fn bernoulli_log_likelihood<T: Scalar>(g: &mut Graph<T>, x: Var, omega: Var) -> Result<Var, DistError> {
    let eps = T::lit(EPS_CLAMP);
    let w = g.clamp(omega, eps, T::one() - eps);
    let log_w = g.log(w, eps);
    let one_minus_w = g.one_minus(w);
    let log_1mw = g.log(one_minus_w, eps);
    let on = g.mul(x, log_w)?;
    let one_minus_x = g.one_minus(x);
    let off = g.mul(one_minus_x, log_1mw)?;
    let total = g.add(on, off)?;
    Ok(g.sum(total))
}

/// KL from a diagonal Gaussian `N(mean, exp(log_var))` to the standard normal,
/// summed over frames and latent dimensions.
pub fn kl_gaussian_standard<T: Scalar>(g: &mut Graph<T>, mean: Var, log_var: Var) -> Result<Var, DistError> {
    let var = g.exp(log_var);
    let m2 = g.mul(mean, mean)?;
    let a = g.add(var, m2)?;
    let b = g.sub(a, log_var)?;
    let s = g.sum(b);
    let half = g.scale(s, T::lit(0.5));
    let count = T::from_usize_lossy(g.value(mean).len());
    Ok(g.offset(half, -T::lit(0.5) * count))
}

/// `-sum pi log pi` over all frames, with `0 log 0 = 0`.
pub fn categorical_entropy<T: Scalar>(g: &mut Graph<T>, pi: Var) -> Result<Var, DistError> {
    check_simplex(g.value(pi))?;
    let lp = g.log(pi, T::lit(EPS_CLAMP));
    let t = g.mul(pi, lp)?;
    let s = g.sum(t);
    Ok(g.scale(s, -T::one()))
}

/// Expected log-probability under the uniform label prior, `-sum_{n,k} pi log K`,
/// kept as the literal sum so gradients reach `pi`.
pub fn uniform_prior_expectation<T: Scalar>(g: &mut Graph<T>, pi: Var) -> Result<Var, DistError> {
    check_simplex(g.value(pi))?;
    let k = T::from_usize_lossy(g.value(pi).cols());
    let s = g.sum(pi);
    Ok(g.scale(s, -k.ln()))
}

/// Relaxed one-hot sample `softmax((log pi + eps) / tau)`.
pub fn gumbel_softmax_sample<T: Scalar>(
    g: &mut Graph<T>,
    pi: Var,
    noise: &GumbelNoise<T>,
    tau: f64,
) -> Result<Var, DistError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(DistError::Temperature(tau));
    }
    let lp = g.log(pi, T::lit(EPS_CLAMP));
    let e = g.constant(noise.eps.clone());
    let perturbed = g.add(lp, e)?;
    let scaled = g.scale(perturbed, T::lit(1.0 / tau));
    Ok(g.softmax(scaled)?)
}

/// `mean + eps * exp(log_var / 2)`.
pub fn gaussian_reparam_sample<T: Scalar>(
    g: &mut Graph<T>,
    mean: Var,
    log_var: Var,
    noise: &GaussianNoise<T>,
) -> Result<Var, DistError> {
    let half = g.scale(log_var, T::lit(0.5));
    let std = g.exp(half);
    let e = g.constant(noise.eps.clone());
    let spread = g.mul(e, std)?;
    Ok(g.add(mean, spread)?)
}
