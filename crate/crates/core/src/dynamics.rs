//! Generative transition machinery: the bank of base linear systems, the
//! way switching variables mix them, the continuous-state transition and the
//! learned switch transition network.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::diff::nn::{Linear, ResMlp};
use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::distributions::{ConcreteParams, DistError, GaussianParams, RelaxedBernoulliParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("switch weights have {found} columns, bank holds {expected} systems")]
    SystemCount { expected: usize, found: usize },
    #[error("switch weights row {row} is not a valid {mode} weighting")]
    InvalidWeights { mode: SwitchMode, row: usize },
    #[error("expected {what} with {expected} columns, found {found}")]
    Width {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("operation requires {expected} mode, model uses {found}")]
    Mode { expected: SwitchMode, found: SwitchMode },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// How switching variables are distributed and how they select systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwitchMode {
    /// Concrete variable on the simplex; systems combined convexly.
    ConcreteSoftmax,
    /// Gaussian variable decoded to mixing weights by a softmax layer.
    GaussianHierarchical,
    /// Independent relaxed Bernoulli gates; active systems are summed.
    RelaxedBernoulli,
}

impl fmt::Display for SwitchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwitchMode::ConcreteSoftmax => "concrete",
            SwitchMode::GaussianHierarchical => "gaussian",
            SwitchMode::RelaxedBernoulli => "bernoulli",
        })
    }
}

impl FromStr for SwitchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concrete" | "concrete_softmax" => Ok(SwitchMode::ConcreteSoftmax),
            "gaussian" | "normal" | "gaussian_hierarchical" => Ok(SwitchMode::GaussianHierarchical),
            "bernoulli" | "relaxed_bernoulli" => Ok(SwitchMode::RelaxedBernoulli),
            other => Err(format!("unknown switch mode '{other}'")),
        }
    }
}

/// `M` base systems `(A, B, Q)` with separate generative and inference
/// noise banks. Matrices are stored flattened row-major: `A` as
/// `[M, n_z·n_z]`, `B` as `[M, n_z·n_u]`, noise banks as `[M, n_z]`
/// log-variances.
#[derive(Clone, Debug)]
pub struct MatrixBank {
    pub m: usize,
    pub n_z: usize,
    pub n_u: usize,
    a: String,
    b: String,
    q_prior_log: String,
    q_post_log: String,
}

impl MatrixBank {
    /// `A⁽ⁱ⁾ = c·I + N(0, 0.01²)`, `B⁽ⁱ⁾ ~ N(0, 0.01²)`, both noise banks at
    /// variance 0.1. `c = 1`, except in relaxed-Bernoulli mode where `c = 2/M`
    /// so that the expected sum of half-active systems starts near identity.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        m: usize,
        n_z: usize,
        n_u: usize,
        mode: SwitchMode,
    ) -> Result<Self, DiffError> {
        let bank = Self {
            m,
            n_z,
            n_u,
            a: format!("{prefix}.A"),
            b: format!("{prefix}.B"),
            q_prior_log: format!("{prefix}.Q_prior_log"),
            q_post_log: format!("{prefix}.Q_post_log"),
        };
        let diag = match mode {
            SwitchMode::RelaxedBernoulli => 2.0 / m as f64,
            _ => 1.0,
        };
        store.insert_normal(&bank.a, &[m, n_z * n_z], 0.01)?;
        let a = store.get_mut(&bank.a).expect("just inserted");
        for i in 0..m {
            for d in 0..n_z {
                a.data_mut()[i * n_z * n_z + d * n_z + d] += diag;
            }
        }
        store.insert_normal(&bank.b, &[m, n_z * n_u], 0.01)?;
        store.insert_const(&bank.q_prior_log, &[m, n_z], 0.1f64.ln())?;
        store.insert_const(&bank.q_post_log, &[m, n_z], 0.1f64.ln())?;
        Ok(bank)
    }

    pub fn a_name(&self) -> &str {
        &self.a
    }

    pub fn b_name(&self) -> &str {
        &self.b
    }

    pub fn q_prior_name(&self) -> &str {
        &self.q_prior_log
    }

    pub fn q_post_name(&self) -> &str {
        &self.q_post_log
    }

    /// Overwrite the bank from explicit per-system matrices (row-major).
    pub fn set_system(
        &self,
        store: &mut ParamStore,
        i: usize,
        a: &[f64],
        b: &[f64],
        q_prior: &[f64],
        q_post: &[f64],
    ) -> Result<(), DiffError> {
        let nz2 = self.n_z * self.n_z;
        let nzu = self.n_z * self.n_u;
        let write = |t: &mut Tensor, width: usize, src: &[f64]| {
            t.data_mut()[i * width..(i + 1) * width].copy_from_slice(src);
        };
        write(store.get_mut(&self.a).expect("bank param"), nz2, a);
        write(store.get_mut(&self.b).expect("bank param"), nzu, b);
        let ql: Vec<f64> = q_prior.iter().map(|v| v.ln()).collect();
        let qp: Vec<f64> = q_post.iter().map(|v| v.ln()).collect();
        write(store.get_mut(&self.q_prior_log).expect("bank param"), self.n_z, &ql);
        write(store.get_mut(&self.q_post_log).expect("bank param"), self.n_z, &qp);
        Ok(())
    }
}

/// Per-row mixed system. `a` is `[N, n_z·n_z]`, `b` is `[N, n_z·n_u]` (absent
/// when there are no controls), variances are `[N, n_z]`.
#[derive(Clone, Copy, Debug)]
pub struct MixedSystem {
    pub a: Var,
    pub b: Option<Var>,
    pub q_prior: Var,
    pub q_post: Var,
}

/// `A_t = Σ sⁱ A⁽ⁱ⁾`, likewise `B_t`; noise variances mixed on the variance
/// scale. Convex for simplex weights, a plain sum for Bernoulli gates.
pub fn mix_matrices(
    g: &mut Graph,
    store: &ParamStore,
    bank: &MatrixBank,
    weights: Var,
    mode: SwitchMode,
) -> Result<MixedSystem, DynamicsError> {
    let (_, cols) = g.shape(weights);
    if cols != bank.m {
        return Err(DynamicsError::SystemCount {
            expected: bank.m,
            found: cols,
        });
    }
    for (row, w) in g.value(weights).chunks(cols).enumerate() {
        let ok = match mode {
            SwitchMode::RelaxedBernoulli => w.iter().all(|v| (0.0..=1.0).contains(v)),
            _ => w.iter().all(|v| *v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= 1e-6,
        };
        if !ok {
            return Err(DynamicsError::InvalidWeights { mode, row });
        }
    }
    let a_bank = g.param(store, &bank.a)?;
    let a = g.matmul(weights, a_bank)?;
    let b = if bank.n_u > 0 {
        let b_bank = g.param(store, &bank.b)?;
        Some(g.matmul(weights, b_bank)?)
    } else {
        None
    };
    let qp_log = g.param(store, &bank.q_prior_log)?;
    let qp = g.exp(qp_log);
    let q_prior = g.matmul(weights, qp)?;
    let qq_log = g.param(store, &bank.q_post_log)?;
    let qq = g.exp(qq_log);
    let q_post = g.matmul(weights, qq)?;
    Ok(MixedSystem { a, b, q_prior, q_post })
}

/// Single affine layer decoding a Gaussian switch sample into mixing weights.
#[derive(Clone, Debug)]
pub struct MixingDecoder {
    layer: Linear,
}

impl MixingDecoder {
    pub fn register(store: &mut ParamStore, prefix: &str, d_s: usize, m: usize) -> Result<Self, DiffError> {
        let std = (1.0 / d_s as f64).sqrt();
        Ok(Self {
            layer: Linear::register(store, prefix, d_s, m, std)?,
        })
    }

    pub fn layer(&self) -> &Linear {
        &self.layer
    }
}

/// `softmax(W s + b)`
pub fn mixing_coefficients(
    g: &mut Graph,
    store: &ParamStore,
    s: Var,
    dec: &MixingDecoder,
) -> Result<Var, DynamicsError> {
    let logits = dec.layer.forward(g, store, s)?;
    Ok(g.softmax_rows(logits))
}

/// Transition mean plus both candidate variances for the mixed system.
#[derive(Clone, Copy, Debug)]
pub struct Transition {
    pub mean: Var,
    pub var_prior: Var,
    pub var_post: Var,
}

impl Transition {
    pub fn prior(&self) -> GaussianParams {
        GaussianParams {
            mean: self.mean,
            var: self.var_prior,
        }
    }

    pub fn posterior(&self) -> GaussianParams {
        GaussianParams {
            mean: self.mean,
            var: self.var_post,
        }
    }
}

/// `μ = A_t z_prev + B_t u_prev` for an already mixed system.
pub fn transition_mean(
    g: &mut Graph,
    system: &MixedSystem,
    z_prev: Var,
    u_prev: Option<Var>,
    n_z: usize,
) -> Result<Var, DynamicsError> {
    let mut mean = g.batch_matvec(system.a, z_prev, n_z)?;
    if let (Some(b), Some(u)) = (system.b, u_prev) {
        let bu = g.batch_matvec(b, u, n_z)?;
        mean = g.add(mean, bu)?;
    }
    Ok(mean)
}

/// Continuous-state transition given realized mixing weights.
pub fn transition_z(
    g: &mut Graph,
    store: &ParamStore,
    z_prev: Var,
    u_prev: Option<Var>,
    weights: Var,
    bank: &MatrixBank,
    mode: SwitchMode,
) -> Result<Transition, DynamicsError> {
    if g.cols(z_prev) != bank.n_z {
        return Err(DynamicsError::Width {
            what: "z_prev",
            expected: bank.n_z,
            found: g.cols(z_prev),
        });
    }
    if let Some(u) = u_prev {
        if g.cols(u) != bank.n_u {
            return Err(DynamicsError::Width {
                what: "u_prev",
                expected: bank.n_u,
                found: g.cols(u),
            });
        }
    }
    let system = mix_matrices(g, store, bank, weights, mode)?;
    let mean = transition_mean(g, &system, z_prev, u_prev, bank.n_z)?;
    Ok(Transition {
        mean,
        var_prior: system.q_prior,
        var_post: system.q_post,
    })
}

/// Prior over the next switching variable.
#[derive(Clone, Copy, Debug)]
pub enum SwitchDist {
    Concrete(ConcreteParams),
    Bernoulli(RelaxedBernoulliParams),
    Gaussian(GaussianParams),
}

/// Residual MLP `g(z_{t-1}, s_{t-1}, u_{t-1})`; inputs are concatenated in
/// the order `(z, s, u)`. Emits `M` logits, or `2·d_s` Gaussian parameters
/// (means then log-variances) in Gaussian mode.
#[derive(Clone, Debug)]
pub struct SwitchTransitionNet {
    mlp: ResMlp,
    pub mode: SwitchMode,
    pub n_z: usize,
    pub s_dim: usize,
    pub n_u: usize,
}

impl SwitchTransitionNet {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        n_z: usize,
        s_dim: usize,
        n_u: usize,
        hidden: usize,
        blocks: usize,
        mode: SwitchMode,
    ) -> Result<Self, DiffError> {
        let out = match mode {
            SwitchMode::GaussianHierarchical => 2 * s_dim,
            _ => s_dim,
        };
        let mlp = ResMlp::register(store, prefix, n_z + s_dim + n_u, hidden, blocks, out, 0.01)?;
        Ok(Self {
            mlp,
            mode,
            n_z,
            s_dim,
            n_u,
        })
    }

    pub fn mlp(&self) -> &ResMlp {
        &self.mlp
    }

    /// Raw network output for concatenated `(z, s, u)` inputs.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_prev: Var,
        s_prev: Var,
        u_prev: Option<Var>,
    ) -> Result<Var, DynamicsError> {
        let mut parts = vec![z_prev, s_prev];
        if let Some(u) = u_prev {
            parts.push(u);
        }
        let input = g.concat_cols(&parts)?;
        Ok(self.mlp.forward(g, store, input)?)
    }
}

/// Prior `p(s_t | z_{t-1}, s_{t-1}, u_{t-1})` at temperature `λ_prior`.
pub fn transition_s(
    g: &mut Graph,
    store: &ParamStore,
    z_prev: Var,
    s_prev: Var,
    u_prev: Option<Var>,
    net: &SwitchTransitionNet,
    lambda_prior: f64,
) -> Result<SwitchDist, DynamicsError> {
    let out = net.logits(g, store, z_prev, s_prev, u_prev)?;
    switch_dist_from_output(g, out, net.mode, net.s_dim, lambda_prior)
}

/// Interpret a raw `[N, ·]` network output as a switching distribution.
pub fn switch_dist_from_output(
    g: &mut Graph,
    out: Var,
    mode: SwitchMode,
    s_dim: usize,
    temperature: f64,
) -> Result<SwitchDist, DynamicsError> {
    Ok(match mode {
        SwitchMode::ConcreteSoftmax => SwitchDist::Concrete(ConcreteParams::new(out, temperature)?),
        SwitchMode::RelaxedBernoulli => SwitchDist::Bernoulli(RelaxedBernoulliParams::new(out, temperature)?),
        SwitchMode::GaussianHierarchical => {
            let mean = g.slice_cols(out, 0, s_dim)?;
            let log_var = g.slice_cols(out, s_dim, 2 * s_dim)?;
            let log_var = g.clamp(log_var, -12.0, 8.0);
            SwitchDist::Gaussian(GaussianParams::from_log_var(g, mean, log_var)?)
        }
    })
}
