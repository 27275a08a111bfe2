//! Structured approximate posterior. Measurement encoders produce beliefs
//! from observations; these are fused with the generative transition, whose
//! mean computation is shared with the prior.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::diff::nn::{GruCell, Linear, ResMlp};
use crate::diff::{DiffError, Graph, ParamStore, Var};
use crate::distributions::{fuse_gaussians, DistError, GaussianParams};
use crate::dynamics::{transition_z, DynamicsError, MatrixBank, SwitchMode, Transition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("sequence of length {len} is shorter than the initial window {k}")]
    ShortSequence { len: usize, k: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

const LOG_VAR_MIN: f64 = -14.0;
const LOG_VAR_MAX: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    /// Switch beliefs condition on `x_{≥t}` through a backward recurrence.
    Smoothing,
    /// Everything at step `t` conditions on `x_t` only.
    Filtering,
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMode::Smoothing => "smoothing",
            InferenceMode::Filtering => "filtering",
        })
    }
}

impl FromStr for InferenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "smoothing" => Ok(InferenceMode::Smoothing),
            "filtering" => Ok(InferenceMode::Filtering),
            other => Err(format!("unknown inference mode '{other}'")),
        }
    }
}

/// Split `[N, 2d]` into a Gaussian with clamped log-variance.
pub fn gaussian_head(g: &mut Graph, out: Var, d: usize) -> Result<GaussianParams, InferenceError> {
    let mean = g.slice_cols(out, 0, d)?;
    let log_var = g.slice_cols(out, d, 2 * d)?;
    let log_var = g.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(GaussianParams::from_log_var(g, mean, log_var)?)
}

/// Residual MLP `x_t → (μ_meas, log σ²_meas)`; its last hidden layer doubles
/// as the per-step feature vector for the switch encoder.
#[derive(Clone, Debug)]
pub struct MeasEncoderZ {
    mlp: ResMlp,
    pub n_x: usize,
    pub n_z: usize,
}

impl MeasEncoderZ {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        n_x: usize,
        hidden: usize,
        blocks: usize,
        n_z: usize,
    ) -> Result<Self, DiffError> {
        let std = if hidden == 0 { (1.0 / n_x as f64).sqrt() } else { (1.0 / hidden as f64).sqrt() };
        Ok(Self {
            mlp: ResMlp::register(store, prefix, n_x, hidden, blocks, 2 * n_z, std)?,
            n_x,
            n_z,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.feature_dim(self.n_x)
    }

    pub fn mlp(&self) -> &ResMlp {
        &self.mlp
    }

    /// Returns `(features, q_meas)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, GaussianParams), InferenceError> {
        let (h, out) = self.mlp.forward_with_hidden(g, store, x)?;
        Ok((h, gaussian_head(g, out, self.n_z)?))
    }
}

/// Switch measurement output at one step.
#[derive(Clone, Copy, Debug)]
pub enum SwitchMeas {
    /// Logits and gate `γ ∈ (0,1)^M`.
    Gated { logits: Var, gamma: Var },
    Gaussian(GaussianParams),
}

/// Backward GRU (smoothing) or MLP head (filtering) over per-step features.
#[derive(Clone, Debug)]
pub struct MeasEncoderS {
    pub mode: InferenceMode,
    pub switch_mode: SwitchMode,
    pub s_dim: usize,
    gru: Option<GruCell>,
    head: ResMlp,
}

impl MeasEncoderS {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        mode: InferenceMode,
        switch_mode: SwitchMode,
        feat_dim: usize,
        n_u: usize,
        hidden: usize,
        s_dim: usize,
    ) -> Result<Self, DiffError> {
        let out = 2 * s_dim;
        let (gru, head) = match mode {
            InferenceMode::Smoothing => {
                let gru = GruCell::register(store, &format!("{prefix}.gru"), feat_dim + n_u, hidden)?;
                let head = ResMlp::register(store, &format!("{prefix}.head"), hidden, 0, 0, out, 0.01)?;
                (Some(gru), head)
            }
            InferenceMode::Filtering => {
                let head = ResMlp::register(store, &format!("{prefix}.head"), feat_dim, hidden, 0, out, 0.01)?;
                (None, head)
            }
        };
        Ok(Self {
            mode,
            switch_mode,
            s_dim,
            gru,
            head,
        })
    }

    /// Raw `[N, 2·s_dim]` outputs for every step. `feats[t]` is `[N, F]`,
    /// `us[t]` the control at `t` (used only by the backward recurrence).
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &[Var],
        us: &[Option<Var>],
    ) -> Result<Vec<Var>, InferenceError> {
        match &self.gru {
            None => feats
                .iter()
                .map(|&f| Ok(self.head.forward(g, store, f)?))
                .collect(),
            Some(gru) => {
                let n = feats.first().map(|&f| g.rows(f)).unwrap_or(0);
                let mut h = g.full(n, gru.hidden, 0.0);
                let mut outs = vec![None; feats.len()];
                for t in (0..feats.len()).rev() {
                    let input = match us.get(t).copied().flatten() {
                        Some(u) => g.concat_cols(&[feats[t], u])?,
                        None => feats[t],
                    };
                    h = gru.step(g, store, input, h)?;
                    outs[t] = Some(self.head.forward(g, store, h)?);
                }
                Ok(outs.into_iter().map(|o| o.expect("filled")).collect())
            }
        }
    }

    pub fn interpret(&self, g: &mut Graph, out: Var) -> Result<SwitchMeas, InferenceError> {
        interpret_switch_output(g, out, self.switch_mode, self.s_dim)
    }
}

pub fn interpret_switch_output(
    g: &mut Graph,
    out: Var,
    mode: SwitchMode,
    s_dim: usize,
) -> Result<SwitchMeas, InferenceError> {
    match mode {
        SwitchMode::GaussianHierarchical => Ok(SwitchMeas::Gaussian(gaussian_head(g, out, s_dim)?)),
        _ => {
            let logits = g.slice_cols(out, 0, s_dim)?;
            let gate = g.slice_cols(out, s_dim, 2 * s_dim)?;
            let gamma = g.sigmoid(gate);
            Ok(SwitchMeas::Gated { logits, gamma })
        }
    }
}

/// `q(z_t) ∝ q_meas(z_t) · q_trans(z_t)` where `q_trans` has the generative
/// transition mean and the inference noise bank. Also returns the transition
/// so the prior can reuse the same mean.
#[allow(clippy::too_many_arguments)]
pub fn infer_z(
    g: &mut Graph,
    store: &ParamStore,
    q_meas: &GaussianParams,
    z_prev: Var,
    weights: Var,
    u_prev: Option<Var>,
    bank: &MatrixBank,
    mode: SwitchMode,
) -> Result<(GaussianParams, Transition), InferenceError> {
    let tr = transition_z(g, store, z_prev, u_prev, weights, bank, mode)?;
    let post = fuse_gaussians(g, q_meas, &tr.posterior())?;
    Ok((post, tr))
}

/// Gated switch posterior logits `log(γ·e^{α_trans} + (1−γ)·e^{α_meas})`.
pub fn infer_s_logits(g: &mut Graph, trans_logits: Var, meas_logits: Var, gamma: Var) -> Result<Var, InferenceError> {
    Ok(g.gated_logit_mix(trans_logits, meas_logits, gamma)?)
}

/// Encoder over the first `k` observations (and controls) producing the
/// auxiliary `h` posterior, the affine map `t_φ: h → z₁`, and an independent
/// network for the first switch.
#[derive(Clone, Debug)]
pub struct InitialStateNet {
    pub k: usize,
    pub n_h: usize,
    pub n_z: usize,
    pub use_controls: bool,
    enc: ResMlp,
    to_z: Linear,
    first_switch: ResMlp,
}

/// Initial-state inference output.
#[derive(Clone, Copy, Debug)]
pub struct InitialState {
    pub z1: Var,
    pub h: Var,
    pub h_post: GaussianParams,
    /// Raw output of the first-switch network (`s_dim` logits, or `2·d_s`
    /// Gaussian parameters).
    pub s2_out: Var,
}

impl InitialStateNet {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        n_x: usize,
        n_u: usize,
        n_z: usize,
        hidden: usize,
        blocks: usize,
        s_out: usize,
    ) -> Result<Self, DiffError> {
        let n_h = n_z;
        let in_dim = k * (n_x + n_u);
        let std = if hidden == 0 { (1.0 / in_dim as f64).sqrt() } else { (1.0 / hidden as f64).sqrt() };
        let enc = ResMlp::register(store, &format!("{prefix}.enc"), in_dim, hidden, blocks, 2 * n_h, std)?;
        let to_z = Linear::register(store, &format!("{prefix}.t"), n_h, n_z, (1.0 / n_h as f64).sqrt())?;
        let first_switch = ResMlp::register(store, &format!("{prefix}.s2"), in_dim, hidden, 0, s_out, 0.01)?;
        Ok(Self {
            k,
            n_h,
            n_z,
            use_controls: n_u > 0,
            enc,
            to_z,
            first_switch,
        })
    }

    pub fn to_z(&self) -> &Linear {
        &self.to_z
    }

    pub fn input(&self, g: &mut Graph, xs: &[Var], us: &[Option<Var>]) -> Result<Var, InferenceError> {
        if xs.len() < self.k {
            return Err(InferenceError::ShortSequence { len: xs.len(), k: self.k });
        }
        let mut parts = Vec::with_capacity(2 * self.k);
        parts.extend_from_slice(&xs[..self.k]);
        if self.use_controls {
            for t in 0..self.k {
                if let Some(u) = us.get(t).copied().flatten() {
                    parts.push(u);
                }
            }
        }
        Ok(g.concat_cols(&parts)?)
    }

    /// `eps` is standard normal noise `[N, n_h]`; zeros give the posterior mean.
    pub fn infer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xs: &[Var],
        us: &[Option<Var>],
        eps: Var,
    ) -> Result<InitialState, InferenceError> {
        let input = self.input(g, xs, us)?;
        let out = self.enc.forward(g, store, input)?;
        let h_post = gaussian_head(g, out, self.n_h)?;
        let h = crate::distributions::sample_gaussian(g, &h_post, eps)?;
        let z1 = self.to_z.forward(g, store, h)?;
        let s2_out = self.first_switch.forward(g, store, input)?;
        Ok(InitialState { z1, h, h_post, s2_out })
    }
}

/// Functional form of initial-state inference.
pub fn infer_initial(
    g: &mut Graph,
    store: &ParamStore,
    xs: &[Var],
    us: &[Option<Var>],
    net: &InitialStateNet,
    eps: Var,
) -> Result<InitialState, InferenceError> {
    net.infer(g, store, xs, us, eps)
}
