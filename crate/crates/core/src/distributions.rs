//! Reparameterized sampling, densities and divergences for diagonal
//! Gaussians, Concrete (Gumbel-softmax) and relaxed Bernoulli variables.
//!
//! All parameters are graph nodes laid out row-wise: row `r` of every
//! operand belongs to the same batch element. Noise (standard normal,
//! Gumbel, logistic) is supplied by the caller so that each batch row can
//! draw from its own stream.

use rand::Rng;
use thiserror::Error;

use crate::diff::{DiffError, Graph, Var};
use crate::rng;

/// Samples are clamped into `[SIMPLEX_EPS, 1 - SIMPLEX_EPS]` before densities
/// are evaluated.
pub const SIMPLEX_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("variance must be positive, found {0}")]
    NonPositiveVariance(f64),
    #[error("temperature must be positive, found {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("point is off the simplex: coordinates sum to {0}")]
    OffSimplex(f64),
    #[error("coordinate {0} is not strictly positive")]
    NonPositiveCoordinate(f64),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Diagonal Gaussian with per-row mean and variance.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub var: Var,
}

impl GaussianParams {
    pub fn new(g: &Graph, mean: Var, var: Var) -> Result<Self, DistError> {
        check_same(g, mean, var)?;
        check_positive_var(g, var)?;
        Ok(Self { mean, var })
    }

    pub fn from_log_var(g: &mut Graph, mean: Var, log_var: Var) -> Result<Self, DistError> {
        check_same(g, mean, log_var)?;
        let var = g.exp(log_var);
        Ok(Self { mean, var })
    }

    /// `N(0, I)` with the given shape.
    pub fn standard(g: &mut Graph, rows: usize, cols: usize) -> Self {
        let mean = g.full(rows, cols, 0.0);
        let var = g.full(rows, cols, 1.0);
        Self { mean, var }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConcreteParams {
    pub logits: Var,
    pub temperature: f64,
}

impl ConcreteParams {
    pub fn new(logits: Var, temperature: f64) -> Result<Self, DistError> {
        check_temperature(temperature)?;
        Ok(Self { logits, temperature })
    }
}

/// `M` independent binary Concrete variables.
#[derive(Clone, Copy, Debug)]
pub struct RelaxedBernoulliParams {
    pub logits: Var,
    pub temperature: f64,
}

impl RelaxedBernoulliParams {
    pub fn new(logits: Var, temperature: f64) -> Result<Self, DistError> {
        check_temperature(temperature)?;
        Ok(Self { logits, temperature })
    }
}

fn check_temperature(t: f64) -> Result<(), DistError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(DistError::NonPositiveTemperature(t))
    }
}

fn check_same(g: &Graph, a: Var, b: Var) -> Result<(), DistError> {
    if g.shape(a) != g.shape(b) {
        return Err(DistError::DimMismatch(g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn check_positive_var(g: &Graph, var: Var) -> Result<(), DistError> {
    if let Some(&v) = g.value(var).iter().find(|v| !(**v > 0.0)) {
        return Err(DistError::NonPositiveVariance(v));
    }
    Ok(())
}

/// `μ + σ ⊙ ε`
pub fn sample_gaussian(g: &mut Graph, p: &GaussianParams, eps: Var) -> Result<Var, DistError> {
    check_same(g, p.mean, eps)?;
    check_positive_var(g, p.var)?;
    let log_var = g.log(p.var);
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    Ok(g.add(p.mean, noise)?)
}

/// Closed-form `KL(q ‖ p)` summed over columns: `[N,d] -> [N,1]`.
pub fn kl_gaussian(g: &mut Graph, q: &GaussianParams, p: &GaussianParams) -> Result<Var, DistError> {
    check_same(g, q.mean, p.mean)?;
    check_same(g, q.var, p.var)?;
    let log_vp = g.log(p.var);
    let log_vq = g.log(q.var);
    let log_ratio = g.sub(log_vp, log_vq)?;
    let diff = g.sub(q.mean, p.mean)?;
    let sq = g.mul(diff, diff)?;
    let num = g.add(q.var, sq)?;
    let frac = g.div(num, p.var)?;
    let inner = g.add(log_ratio, frac)?;
    let inner = g.offset(inner, -1.0);
    let per_dim = g.scale(inner, 0.5);
    Ok(g.sum_cols(per_dim))
}

/// Gaussian log-density of `x` summed over columns: `[N,d] -> [N,1]`.
pub fn gaussian_log_density(g: &mut Graph, x: Var, p: &GaussianParams) -> Result<Var, DistError> {
    check_same(g, x, p.mean)?;
    check_same(g, x, p.var)?;
    let diff = g.sub(x, p.mean)?;
    let sq = g.mul(diff, diff)?;
    let mahal = g.div(sq, p.var)?;
    let log_var = g.log(p.var);
    let s = g.add(mahal, log_var)?;
    let s = g.offset(s, (2.0 * std::f64::consts::PI).ln());
    let per_dim = g.scale(s, -0.5);
    Ok(g.sum_cols(per_dim))
}

/// Product of two Gaussian densities, renormalized:
/// `μ = (μ_a σ²_b + μ_b σ²_a)/(σ²_a + σ²_b)`, `σ² = σ²_a σ²_b/(σ²_a + σ²_b)`.
pub fn fuse_gaussians(g: &mut Graph, a: &GaussianParams, b: &GaussianParams) -> Result<GaussianParams, DistError> {
    check_same(g, a.mean, b.mean)?;
    check_same(g, a.var, b.var)?;
    check_same(g, a.mean, a.var)?;
    check_positive_var(g, a.var)?;
    check_positive_var(g, b.var)?;
    let total = g.add(a.var, b.var)?;
    let wa = g.mul(a.mean, b.var)?;
    let wb = g.mul(b.mean, a.var)?;
    let num = g.add(wa, wb)?;
    let mean = g.div(num, total)?;
    let prod = g.mul(a.var, b.var)?;
    let var = g.div(prod, total)?;
    Ok(GaussianParams { mean, var })
}

/// `softmax((log α + g) / λ)` row-wise.
pub fn sample_concrete(g: &mut Graph, p: &ConcreteParams, gumbel: Var) -> Result<Var, DistError> {
    check_temperature(p.temperature)?;
    check_same(g, p.logits, gumbel)?;
    let perturbed = g.add(p.logits, gumbel)?;
    let scaled = g.scale(perturbed, 1.0 / p.temperature);
    Ok(g.softmax_rows(scaled))
}

/// Checked Concrete log-density. Every row of `x` must have strictly positive
/// coordinates summing to one within [`SIMPLEX_EPS`].
pub fn concrete_log_density(g: &mut Graph, x: Var, p: &ConcreteParams) -> Result<Var, DistError> {
    check_temperature(p.temperature)?;
    check_same(g, x, p.logits)?;
    let k = g.cols(x);
    for row in g.value(x).chunks(k) {
        if let Some(&v) = row.iter().find(|v| !(**v > 0.0)) {
            return Err(DistError::NonPositiveCoordinate(v));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_EPS {
            return Err(DistError::OffSimplex(s));
        }
    }
    let xc = g.clamp(x, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS);
    Ok(g.concrete_log_density(xc, p.logits, p.temperature)?)
}

/// Monte-Carlo `KL(q ‖ p)` between Concrete distributions, averaging `n`
/// samples per row. `gumbels` has `N·n` rows; rows `i·n..(i+1)·n` belong to
/// batch element `i`. Differentiable through the samples.
pub fn kl_concrete_mc(
    g: &mut Graph,
    q: &ConcreteParams,
    p: &ConcreteParams,
    gumbels: Var,
    n: usize,
) -> Result<Var, DistError> {
    check_temperature(q.temperature)?;
    check_temperature(p.temperature)?;
    check_same(g, q.logits, p.logits)?;
    let q_rep = g.repeat_rows(q.logits, n);
    let x = sample_concrete(
        g,
        &ConcreteParams {
            logits: q_rep,
            temperature: q.temperature,
        },
        gumbels,
    )?;
    let xc = g.clamp(x, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS);
    let log_q = g.concrete_log_density(xc, q_rep, q.temperature)?;
    let p_rep = g.repeat_rows(p.logits, n);
    let log_p = g.concrete_log_density(xc, p_rep, p.temperature)?;
    let diff = g.sub(log_q, log_p)?;
    Ok(g.group_mean_rows(diff, n)?)
}

/// `σ((logit + L) / λ)` with logistic noise `L`.
pub fn sample_relaxed_bernoulli(g: &mut Graph, p: &RelaxedBernoulliParams, logistic: Var) -> Result<Var, DistError> {
    check_temperature(p.temperature)?;
    check_same(g, p.logits, logistic)?;
    let perturbed = g.add(p.logits, logistic)?;
    let scaled = g.scale(perturbed, 1.0 / p.temperature);
    Ok(g.sigmoid(scaled))
}

pub fn relaxed_bernoulli_log_density(g: &mut Graph, x: Var, p: &RelaxedBernoulliParams) -> Result<Var, DistError> {
    check_temperature(p.temperature)?;
    check_same(g, x, p.logits)?;
    let xc = g.clamp(x, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS);
    Ok(g.binary_concrete_log_density(xc, p.logits, p.temperature)?)
}

/// Monte-Carlo KL between relaxed Bernoulli vectors; noise layout as in
/// [`kl_concrete_mc`].
pub fn kl_relaxed_bernoulli_mc(
    g: &mut Graph,
    q: &RelaxedBernoulliParams,
    p: &RelaxedBernoulliParams,
    logistic: Var,
    n: usize,
) -> Result<Var, DistError> {
    check_same(g, q.logits, p.logits)?;
    let q_rep = g.repeat_rows(q.logits, n);
    let x = sample_relaxed_bernoulli(
        g,
        &RelaxedBernoulliParams {
            logits: q_rep,
            temperature: q.temperature,
        },
        logistic,
    )?;
    let xc = g.clamp(x, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS);
    let log_q = g.binary_concrete_log_density(xc, q_rep, q.temperature)?;
    let p_rep = g.repeat_rows(p.logits, n);
    let log_p = g.binary_concrete_log_density(xc, p_rep, p.temperature)?;
    let diff = g.sub(log_q, log_p)?;
    Ok(g.group_mean_rows(diff, n)?)
}

pub fn normal_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng::normal(rng)).collect()
}

pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng::gumbel(rng)).collect()
}

pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng::logistic(rng)).collect()
}
