//! The trainable sequence model: per-step ELBO, sequence unroll, decoders,
//! filtering and multi-step prediction.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diff::nn::ResMlp;
use crate::diff::{DiffError, Graph, ParamStore, Var};
use crate::distributions::{
    fuse_gaussians, gaussian_log_density, kl_concrete_mc, kl_gaussian, kl_relaxed_bernoulli_mc, sample_concrete,
    sample_gaussian, sample_relaxed_bernoulli, ConcreteParams, DistError, GaussianParams, RelaxedBernoulliParams,
    SIMPLEX_EPS,
};
use crate::dynamics::{
    mixing_coefficients, switch_dist_from_output, transition_z, DynamicsError, MatrixBank, MixingDecoder,
    SwitchDist, SwitchMode, SwitchTransitionNet,
};
use crate::inference::{
    infer_s_logits, infer_z, InferenceError, InferenceMode, InitialStateNet, MeasEncoderS, MeasEncoderZ, SwitchMeas,
};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequences need at least {min} steps, got {len}")]
    TooShort { len: usize, min: usize },
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("data has {found} {what} dimensions, model expects {expected}")]
    DataDim {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: &'static str, step: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Gaussian,
    Bernoulli,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Gaussian => "gaussian",
            DecoderKind::Bernoulli => "bernoulli",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(DecoderKind::Gaussian),
            "bernoulli" => Ok(DecoderKind::Bernoulli),
            other => Err(format!("unknown decoder '{other}'")),
        }
    }
}

/// Model hyperparameters. `n_s` is the number of systems `M` for relaxed
/// discrete switches and the switch dimension `d_s` in Gaussian mode, where
/// `n_systems` gives `M` (0 means "same as `n_s`").
#[derive(Clone, Debug, PartialEq)]
pub struct SvbfConfig {
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
    pub n_s: usize,
    pub n_systems: usize,
    pub switch_mode: SwitchMode,
    pub inference_mode: InferenceMode,
    pub lambda_prior: f64,
    pub lambda_post: f64,
    pub beta: f64,
    pub anneal_init: f64,
    pub anneal_rate: f64,
    pub anneal_every: u64,
    pub decoder: DecoderKind,
    pub k_init: usize,
    pub mc_kl_samples: usize,
    pub enc_hidden: usize,
    pub enc_blocks: usize,
    pub dec_hidden: usize,
    pub dec_blocks: usize,
    pub trans_hidden: usize,
    pub trans_blocks: usize,
    pub init_hidden: usize,
    pub init_blocks: usize,
    pub rnn_hidden: usize,
    pub predict_sample_switch: bool,
}

impl Default for SvbfConfig {
    fn default() -> Self {
        Self {
            n_x: 2,
            n_u: 1,
            n_z: 4,
            n_s: 8,
            n_systems: 0,
            switch_mode: SwitchMode::ConcreteSoftmax,
            inference_mode: InferenceMode::Filtering,
            lambda_prior: 2.0,
            lambda_post: 0.67,
            beta: 0.1,
            anneal_init: 4.0,
            anneal_rate: 0.95,
            anneal_every: 100,
            decoder: DecoderKind::Gaussian,
            k_init: 4,
            mc_kl_samples: 10,
            enc_hidden: 128,
            enc_blocks: 0,
            dec_hidden: 128,
            dec_blocks: 0,
            trans_hidden: 128,
            trans_blocks: 0,
            init_hidden: 128,
            init_blocks: 0,
            rnn_hidden: 64,
            predict_sample_switch: false,
        }
    }
}

impl SvbfConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_x == 0 || self.n_z == 0 || self.n_s == 0 {
            return bad("n_x, n_z and n_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.lambda_prior > 0.0 && self.lambda_post > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.mc_kl_samples == 0 {
            return bad("mc_kl_samples must be at least 1");
        }
        if self.k_init == 0 {
            return bad("k_init must be at least 1");
        }
        if !(self.anneal_init >= 1.0) || !(self.anneal_rate > 0.0 && self.anneal_rate <= 1.0) || self.anneal_every == 0 {
            return bad("annealing needs init >= 1, rate in (0, 1], every >= 1");
        }
        if self.inference_mode == InferenceMode::Smoothing && self.rnn_hidden == 0 {
            return bad("smoothing inference needs rnn_hidden > 0");
        }
        Ok(())
    }

    /// Number of base systems.
    pub fn m(&self) -> usize {
        match self.switch_mode {
            SwitchMode::GaussianHierarchical if self.n_systems > 0 => self.n_systems,
            _ => self.n_s,
        }
    }

    /// Multiplier applied to both temperatures at a training step:
    /// `1 + (init − 1)·rate^⌊step/every⌋`.
    pub fn anneal_factor(&self, step: u64) -> f64 {
        1.0 + (self.anneal_init - 1.0) * self.anneal_rate.powf((step / self.anneal_every) as f64)
    }
}

/// Observation model `p(x_t | z_t)`: residual MLP mean with a learned global
/// log-variance per dimension, or Bernoulli logits.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub kind: DecoderKind,
    mlp: ResMlp,
    log_var: Option<String>,
}

impl Decoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        kind: DecoderKind,
        n_z: usize,
        hidden: usize,
        blocks: usize,
        n_x: usize,
    ) -> Result<Self, DiffError> {
        let std = if hidden == 0 { (1.0 / n_z as f64).sqrt() } else { (1.0 / hidden as f64).sqrt() };
        let mlp = ResMlp::register(store, prefix, n_z, hidden, blocks, n_x, std)?;
        let log_var = match kind {
            DecoderKind::Gaussian => {
                let name = format!("{prefix}.log_var");
                store.insert_const(&name, &[1, n_x], 0.0)?;
                Some(name)
            }
            DecoderKind::Bernoulli => None,
        };
        Ok(Self { kind, mlp, log_var })
    }

    pub fn mlp(&self) -> &ResMlp {
        &self.mlp
    }

    pub fn log_var_name(&self) -> Option<&str> {
        self.log_var.as_deref()
    }

    /// `log p(x | z)` per row, `[N,1]`.
    pub fn log_lik(&self, g: &mut Graph, store: &ParamStore, z: Var, x: Var) -> Result<Var, ModelError> {
        let out = self.mlp.forward(g, store, z)?;
        match &self.log_var {
            Some(name) => {
                let lv = g.param(store, name)?;
                let (n, d) = g.shape(out);
                let zeros = g.full(n, d, 0.0);
                let lv = g.add_row(zeros, lv)?;
                let p = GaussianParams::from_log_var(g, out, lv)?;
                Ok(gaussian_log_density(g, x, &p)?)
            }
            None => Ok(g.bernoulli_log_lik(out, x)?),
        }
    }

    /// Predictive mean: Gaussian mean or Bernoulli probabilities.
    pub fn mean(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var, ModelError> {
        let out = self.mlp.forward(g, store, z)?;
        Ok(match self.kind {
            DecoderKind::Gaussian => out,
            DecoderKind::Bernoulli => g.sigmoid(out),
        })
    }
}

/// Dense `[N, T, d]` sequences in `f64`, row-major with time inner to
/// sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqData {
    pub n: usize,
    pub t: usize,
    pub d_x: usize,
    pub d_u: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl SeqData {
    pub fn new(n: usize, t: usize, d_x: usize, d_u: usize, x: Vec<f64>, u: Vec<f64>) -> Result<Self, ModelError> {
        if x.len() != n * t * d_x || u.len() != n * t * d_u {
            return Err(ModelError::Config(format!(
                "sequence buffers do not match [{n}, {t}, {d_x}] / [{n}, {t}, {d_u}]"
            )));
        }
        Ok(Self { n, t, d_x, d_u, x, u })
    }

    /// Observations at time `t` for every sequence, `[N·d_x]`.
    pub fn x_at(&self, t: usize) -> Vec<f64> {
        gather_step(&self.x, self.n, self.t, self.d_x, t)
    }

    pub fn u_at(&self, t: usize) -> Vec<f64> {
        gather_step(&self.u, self.n, self.t, self.d_u, t)
    }

    /// Sub-batch of sequences over time range `[start, start+len)`.
    pub fn window(&self, rows: &[usize], start: usize, len: usize) -> SeqData {
        let cut = |src: &[f64], d: usize| {
            let mut out = Vec::with_capacity(rows.len() * len * d);
            for &r in rows {
                let base = (r * self.t + start) * d;
                out.extend_from_slice(&src[base..base + len * d]);
            }
            out
        };
        SeqData {
            n: rows.len(),
            t: len,
            d_x: self.d_x,
            d_u: self.d_u,
            x: cut(&self.x, self.d_x),
            u: cut(&self.u, self.d_u),
        }
    }
}

fn gather_step(src: &[f64], n: usize, t_len: usize, d: usize, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let base = (i * t_len + t) * d;
        out.extend_from_slice(&src[base..base + d]);
    }
    out
}

/// Per-row noise streams. In deterministic mode every draw is zero, which
/// turns reparameterized samples into means and Concrete samples into
/// `softmax(logits / λ)`.
pub struct Noise {
    rngs: Vec<ChaCha8Rng>,
    deterministic: bool,
    n: usize,
}

impl Noise {
    pub fn from_seeds(seeds: &[u64]) -> Self {
        Self {
            rngs: seeds.iter().map(|&s| rng::stream(s, &[])).collect(),
            deterministic: false,
            n: seeds.len(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            rngs: Vec::new(),
            deterministic: true,
            n,
        }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    fn draw(&mut self, g: &mut Graph, reps: usize, cols: usize, f: fn(&mut ChaCha8Rng) -> f64) -> Var {
        if self.deterministic {
            return g.full(self.n * reps, cols, 0.0);
        }
        let mut data = Vec::with_capacity(self.n * reps * cols);
        for r in self.rngs.iter_mut() {
            for _ in 0..reps * cols {
                data.push(f(r));
            }
        }
        g.constant(self.n * reps, cols, data).expect("noise shape")
    }

    pub fn normal(&mut self, g: &mut Graph, cols: usize) -> Var {
        self.draw(g, 1, cols, |r| rng::normal(r))
    }

    pub fn gumbel(&mut self, g: &mut Graph, reps: usize, cols: usize) -> Var {
        self.draw(g, reps, cols, |r| rng::gumbel(r))
    }

    pub fn logistic(&mut self, g: &mut Graph, reps: usize, cols: usize) -> Var {
        self.draw(g, reps, cols, |r| rng::logistic(r))
    }
}

/// Values recorded at one time step, each flattened `[N·d]` (per-row terms
/// are `[N]`).
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub z: Vec<f64>,
    pub z_post_mean: Vec<f64>,
    pub z_post_var: Vec<f64>,
    pub z_prior_mean: Vec<f64>,
    pub z_prior_var: Vec<f64>,
    /// Switch sample; empty at the first step, which has no switch.
    pub s: Vec<f64>,
    /// Mixing weights applied to the bank.
    pub weights: Vec<f64>,
    pub s_post: Vec<f64>,
    pub s_prior: Vec<f64>,
    pub gamma: Vec<f64>,
    pub log_lik: Vec<f64>,
    pub kl_z: Vec<f64>,
    pub kl_s: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct UnrollOptions {
    /// Also compute the per-row joint `log q(h, s, z) − log p(h, s, z)` at the
    /// sampled path.
    pub joint_log_ratio: bool,
    pub traces: bool,
}

pub struct Unrolled {
    /// Scalar loss: negative ELBO summed over time, averaged over rows.
    pub loss: Var,
    pub per_seq: Vec<f64>,
    /// Batch means summed over time. `kl_s` is unscaled by β.
    pub recon: f64,
    pub kl_z: f64,
    pub kl_s: f64,
    pub kl_h: f64,
    pub per_seq_kl: Vec<f64>,
    pub log_ratio: Option<Vec<f64>>,
    pub traces: Vec<StepTrace>,
}

/// Noise-free filtered belief at a time step, `[N·d]` buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub t: usize,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Svbf {
    pub cfg: SvbfConfig,
    pub bank: MatrixBank,
    pub trans_s: SwitchTransitionNet,
    pub mix: Option<MixingDecoder>,
    pub enc_z: MeasEncoderZ,
    pub enc_s: MeasEncoderS,
    pub init: InitialStateNet,
    pub decoder: Decoder,
}

struct SwitchStep {
    sample: Var,
    weights: Var,
    kl: Var,
    log_ratio: Option<Var>,
    post: Var,
    prior: Var,
    gamma: Option<Var>,
}

impl Svbf {
    /// Register every parameter of the model in `store`.
    pub fn build(cfg: SvbfConfig, store: &mut ParamStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let m = cfg.m();
        let s_dim = cfg.n_s;
        let mode = cfg.switch_mode;
        let bank = MatrixBank::register(store, "bank", m, cfg.n_z, cfg.n_u, mode)?;
        let trans_s = SwitchTransitionNet::register(
            store,
            "trans_s",
            cfg.n_z,
            s_dim,
            cfg.n_u,
            cfg.trans_hidden,
            cfg.trans_blocks,
            mode,
        )?;
        let mix = match mode {
            SwitchMode::GaussianHierarchical => Some(MixingDecoder::register(store, "mix", s_dim, m)?),
            _ => None,
        };
        let enc_z = MeasEncoderZ::register(store, "enc_z", cfg.n_x, cfg.enc_hidden, cfg.enc_blocks, cfg.n_z)?;
        let enc_s = MeasEncoderS::register(
            store,
            "enc_s",
            cfg.inference_mode,
            mode,
            enc_z.feature_dim(),
            cfg.n_u,
            match cfg.inference_mode {
                InferenceMode::Smoothing => cfg.rnn_hidden,
                InferenceMode::Filtering => cfg.enc_hidden,
            },
            s_dim,
        )?;
        let s_out = match mode {
            SwitchMode::GaussianHierarchical => 2 * s_dim,
            _ => s_dim,
        };
        let init = InitialStateNet::register(
            store,
            "init",
            cfg.k_init,
            cfg.n_x,
            cfg.n_u,
            cfg.n_z,
            cfg.init_hidden,
            cfg.init_blocks,
            s_out,
        )?;
        let decoder = Decoder::register(store, "dec", cfg.decoder, cfg.n_z, cfg.dec_hidden, cfg.dec_blocks, cfg.n_x)?;
        Ok(Self {
            cfg,
            bank,
            trans_s,
            mix,
            enc_z,
            enc_s,
            init,
            decoder,
        })
    }

    pub fn new(cfg: SvbfConfig, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        let mut store = ParamStore::new(seed);
        let model = Self::build(cfg, &mut store)?;
        Ok((model, store))
    }

    pub fn s_dim(&self) -> usize {
        self.cfg.n_s
    }

    fn check_data(&self, data: &SeqData) -> Result<(), ModelError> {
        if data.d_x != self.cfg.n_x {
            return Err(ModelError::DataDim {
                what: "observation",
                expected: self.cfg.n_x,
                found: data.d_x,
            });
        }
        if data.d_u != self.cfg.n_u {
            return Err(ModelError::DataDim {
                what: "control",
                expected: self.cfg.n_u,
                found: data.d_u,
            });
        }
        Ok(())
    }

    fn controls(&self, g: &mut Graph, data: &SeqData) -> Result<Vec<Option<Var>>, ModelError> {
        (0..data.t)
            .map(|t| {
                if data.d_u == 0 {
                    Ok(None)
                } else {
                    Ok(Some(g.constant(data.n, data.d_u, data.u_at(t))?))
                }
            })
            .collect()
    }

    /// Weights applied to the bank for a switch sample.
    fn weights(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var, ModelError> {
        match &self.mix {
            Some(dec) => Ok(mixing_coefficients(g, store, s, dec)?),
            None => Ok(s),
        }
    }

    /// Uniform prior over the first switch: zero logits, or `N(0, I)`.
    fn first_prior(&self, g: &mut Graph, n: usize, temp: f64) -> Result<SwitchDist, ModelError> {
        let s_dim = self.s_dim();
        Ok(match self.cfg.switch_mode {
            SwitchMode::GaussianHierarchical => SwitchDist::Gaussian(GaussianParams::standard(g, n, s_dim)),
            SwitchMode::ConcreteSoftmax => SwitchDist::Concrete(ConcreteParams::new(g.full(n, s_dim, 0.0), temp)?),
            SwitchMode::RelaxedBernoulli => {
                SwitchDist::Bernoulli(RelaxedBernoulliParams::new(g.full(n, s_dim, 0.0), temp)?)
            }
        })
    }

    /// Prior at step `t ≥ 1` given the previous latent state.
    #[allow(clippy::too_many_arguments)]
    fn switch_prior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        t: usize,
        z_prev: Var,
        s_prev: Option<Var>,
        u_prev: Option<Var>,
        temp: f64,
    ) -> Result<(SwitchDist, Option<Var>), ModelError> {
        match (t, s_prev) {
            (1, _) | (_, None) => Ok((self.first_prior(g, g.rows(z_prev), temp)?, None)),
            (_, Some(s_prev)) => {
                let out = self.trans_s.logits(g, store, z_prev, s_prev, u_prev)?;
                let dist = switch_dist_from_output(g, out, self.cfg.switch_mode, self.s_dim(), temp)?;
                Ok((dist, Some(out)))
            }
        }
    }

    /// Posterior switch at step `t`, its sample, KL and bank weights.
    #[allow(clippy::too_many_arguments)]
    fn switch_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        noise: &mut Noise,
        trans_out: Var,
        meas: SwitchMeas,
        prior: SwitchDist,
        lambda_post: f64,
        want_ratio: bool,
        want_kl: bool,
    ) -> Result<SwitchStep, ModelError> {
        let s_dim = self.s_dim();
        let n_mc = self.cfg.mc_kl_samples;
        match (meas, prior) {
            (SwitchMeas::Gated { logits, gamma }, SwitchDist::Concrete(p)) => {
                let post_logits = infer_s_logits(g, trans_out, logits, gamma)?;
                let q = ConcreteParams::new(post_logits, lambda_post)?;
                let gum = noise.gumbel(g, 1, s_dim);
                let sample = sample_concrete(g, &q, gum)?;
                let kl = if want_kl {
                    let gums = noise.gumbel(g, n_mc, s_dim);
                    kl_concrete_mc(g, &q, &p, gums, n_mc)?
                } else {
                    g.full(g.rows(sample), 1, 0.0)
                };
                let log_ratio = if want_ratio {
                    let xc = g.clamp(sample, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS);
                    let lq = g.concrete_log_density(xc, q.logits, q.temperature)?;
                    let lp = g.concrete_log_density(xc, p.logits, p.temperature)?;
                    Some(g.sub(lq, lp)?)
                } else {
                    None
                };
                let weights = self.weights(g, store, sample)?;
                Ok(SwitchStep {
                    sample,
                    weights,
                    kl,
                    log_ratio,
                    post: post_logits,
                    prior: p.logits,
                    gamma: Some(gamma),
                })
            }
            (SwitchMeas::Gated { logits, gamma }, SwitchDist::Bernoulli(p)) => {
                let post_logits = infer_s_logits(g, trans_out, logits, gamma)?;
                let q = RelaxedBernoulliParams::new(post_logits, lambda_post)?;
                let l = noise.logistic(g, 1, s_dim);
                let sample = sample_relaxed_bernoulli(g, &q, l)?;
                let kl = if want_kl {
                    let ls = noise.logistic(g, n_mc, s_dim);
                    kl_relaxed_bernoulli_mc(g, &q, &p, ls, n_mc)?
                } else {
                    g.full(g.rows(sample), 1, 0.0)
                };
                let log_ratio = if want_ratio {
                    let xc = g.clamp(sample, SIMPLEX_EPS, 1.0 - SIMPLEX_EPS);
                    let lq = g.binary_concrete_log_density(xc, q.logits, q.temperature)?;
                    let lp = g.binary_concrete_log_density(xc, p.logits, p.temperature)?;
                    Some(g.sub(lq, lp)?)
                } else {
                    None
                };
                Ok(SwitchStep {
                    sample,
                    weights: sample,
                    kl,
                    log_ratio,
                    post: post_logits,
                    prior: p.logits,
                    gamma: Some(gamma),
                })
            }
            (SwitchMeas::Gaussian(q_meas), SwitchDist::Gaussian(p)) => {
                let q_trans = crate::inference::gaussian_head(g, trans_out, s_dim)?;
                let q = fuse_gaussians(g, &q_meas, &q_trans)?;
                let eps = noise.normal(g, s_dim);
                let sample = sample_gaussian(g, &q, eps)?;
                let kl = kl_gaussian(g, &q, &p)?;
                let log_ratio = if want_ratio {
                    let lq = gaussian_log_density(g, sample, &q)?;
                    let lp = gaussian_log_density(g, sample, &p)?;
                    Some(g.sub(lq, lp)?)
                } else {
                    None
                };
                let weights = self.weights(g, store, sample)?;
                Ok(SwitchStep {
                    sample,
                    weights,
                    kl,
                    log_ratio,
                    post: q.mean,
                    prior: p.mean,
                    gamma: None,
                })
            }
            _ => Err(ModelError::Config("switch measurement does not match switch prior".into())),
        }
    }

    /// Build the negative ELBO for a batch of sequences on `g`.
    ///
    /// Step 0 reconstructs `x_0` from `z_0 = t_φ(h)` and pays `KL(q(h) ‖ N(0,I))`.
    /// Step 1 draws the first switch with the dedicated first-switch network in
    /// place of the transition network and a uniform prior. Later steps use the
    /// shared switch transition network.
    pub fn unroll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        data: &SeqData,
        noise: &mut Noise,
        temp_factor: f64,
        opts: UnrollOptions,
    ) -> Result<Unrolled, ModelError> {
        self.check_data(data)?;
        let min = 2.max(self.cfg.k_init);
        if data.t < min {
            return Err(ModelError::TooShort { len: data.t, min });
        }
        let n = data.n;
        let (n_x, n_z) = (self.cfg.n_x, self.cfg.n_z);
        let lambda_prior = self.cfg.lambda_prior * temp_factor;
        let lambda_post = self.cfg.lambda_post * temp_factor;
        let beta = self.cfg.beta;

        // Observations are constants; run the measurement encoder on all steps at once.
        let mut stacked = Vec::with_capacity(data.t * n * n_x);
        for t in 0..data.t {
            stacked.extend(data.x_at(t));
        }
        let x_all = g.constant(data.t * n, n_x, stacked)?;
        let (feat_all, q_all) = self.enc_z.forward(g, store, x_all)?;
        let mut xs = Vec::with_capacity(data.t);
        let mut feats = Vec::with_capacity(data.t);
        let mut q_meas = Vec::with_capacity(data.t);
        for t in 0..data.t {
            let (a, b) = (t * n, (t + 1) * n);
            xs.push(g.slice_rows(x_all, a, b)?);
            feats.push(g.slice_rows(feat_all, a, b)?);
            let mean = g.slice_rows(q_all.mean, a, b)?;
            let var = g.slice_rows(q_all.var, a, b)?;
            q_meas.push(GaussianParams { mean, var });
        }
        let us = self.controls(g, data)?;
        let s_meas_raw = self.enc_s.encode(g, store, &feats, &us)?;

        let mut traces = Vec::new();
        let mut per_row_ratio: Option<Var> = None;
        let add_ratio = |g: &mut Graph, acc: &mut Option<Var>, v: Var| -> Result<(), ModelError> {
            *acc = Some(match *acc {
                Some(a) => g.add(a, v)?,
                None => v,
            });
            Ok(())
        };

        // t = 0
        let eps_h = noise.normal(g, self.init.n_h);
        let init = self.init.infer(g, store, &xs, &us, eps_h)?;
        let std_h = GaussianParams::standard(g, n, self.init.n_h);
        let kl_h = kl_gaussian(g, &init.h_post, &std_h)?;
        check_finite(g, kl_h, "kl_h", 0)?;
        if opts.joint_log_ratio {
            let lq = gaussian_log_density(g, init.h, &init.h_post)?;
            let lp = gaussian_log_density(g, init.h, &std_h)?;
            let r = g.sub(lq, lp)?;
            add_ratio(g, &mut per_row_ratio, r)?;
        }
        let ll0 = self.decoder.log_lik(g, store, init.z1, xs[0])?;
        check_finite(g, ll0, "log_lik", 0)?;
        if opts.traces {
            traces.push(StepTrace {
                z: g.value(init.z1).to_vec(),
                log_lik: g.value(ll0).to_vec(),
                kl_z: g.value(kl_h).to_vec(),
                ..Default::default()
            });
        }

        let mut ll_sum = ll0;
        let mut kl_z_sum: Option<Var> = None;
        let mut kl_s_sum: Option<Var> = None;
        let mut z_prev = init.z1;
        let mut s_prev: Option<Var> = None;

        for t in 1..data.t {
            let u_prev = us[t - 1];
            let (prior, trans_out) = self.switch_prior(g, store, t, z_prev, s_prev, u_prev, lambda_prior)?;
            let trans_out = trans_out.unwrap_or(init.s2_out);
            let meas = self.enc_s.interpret(g, s_meas_raw[t])?;
            let sw = self.switch_step(g, store, noise, trans_out, meas, prior, lambda_post, opts.joint_log_ratio, true)?;
            check_finite(g, sw.sample, "s_sample", t)?;
            check_finite(g, sw.kl, "kl_s", t)?;

            let (q_z, tr) = infer_z(g, store, &q_meas[t], z_prev, sw.weights, u_prev, &self.bank, self.cfg.switch_mode)?;
            let eps = noise.normal(g, n_z);
            let z = sample_gaussian(g, &q_z, eps)?;
            let prior_z = tr.prior();
            let kl_z = kl_gaussian(g, &q_z, &prior_z)?;
            check_finite(g, kl_z, "kl_z", t)?;
            let ll = self.decoder.log_lik(g, store, z, xs[t])?;
            check_finite(g, ll, "log_lik", t)?;

            if let Some(r) = sw.log_ratio {
                add_ratio(g, &mut per_row_ratio, r)?;
                let lq = gaussian_log_density(g, z, &q_z)?;
                let lp = gaussian_log_density(g, z, &prior_z)?;
                let rz = g.sub(lq, lp)?;
                add_ratio(g, &mut per_row_ratio, rz)?;
            }
            if opts.traces {
                traces.push(StepTrace {
                    z: g.value(z).to_vec(),
                    z_post_mean: g.value(q_z.mean).to_vec(),
                    z_post_var: g.value(q_z.var).to_vec(),
                    z_prior_mean: g.value(prior_z.mean).to_vec(),
                    z_prior_var: g.value(prior_z.var).to_vec(),
                    s: g.value(sw.sample).to_vec(),
                    weights: g.value(sw.weights).to_vec(),
                    s_post: g.value(sw.post).to_vec(),
                    s_prior: g.value(sw.prior).to_vec(),
                    gamma: sw.gamma.map(|v| g.value(v).to_vec()).unwrap_or_default(),
                    log_lik: g.value(ll).to_vec(),
                    kl_z: g.value(kl_z).to_vec(),
                    kl_s: g.value(sw.kl).to_vec(),
                });
            }
            ll_sum = g.add(ll_sum, ll)?;
            kl_z_sum = Some(match kl_z_sum {
                Some(a) => g.add(a, kl_z)?,
                None => kl_z,
            });
            kl_s_sum = Some(match kl_s_sum {
                Some(a) => g.add(a, sw.kl)?,
                None => sw.kl,
            });
            z_prev = z;
            s_prev = Some(sw.sample);
        }

        let kl_z_sum = kl_z_sum.expect("T >= 2");
        let kl_s_sum = kl_s_sum.expect("T >= 2");
        let kl_zh = g.add(kl_z_sum, kl_h)?;
        let kl_s_scaled = g.scale(kl_s_sum, beta);
        let kl_total = g.add(kl_zh, kl_s_scaled)?;
        let per_row = g.sub(kl_total, ll_sum)?;
        let loss = g.mean(per_row);
        check_finite(g, loss, "loss", data.t)?;

        let mean_of = |g: &Graph, v: Var| g.value(v).iter().sum::<f64>() / n as f64;
        let kl_unscaled: Vec<f64> = g
            .value(kl_zh)
            .iter()
            .zip(g.value(kl_s_sum))
            .map(|(a, b)| a + b)
            .collect();
        Ok(Unrolled {
            loss,
            per_seq: g.value(per_row).to_vec(),
            recon: mean_of(g, ll_sum),
            kl_z: mean_of(g, kl_z_sum),
            kl_s: mean_of(g, kl_s_sum),
            kl_h: mean_of(g, kl_h),
            per_seq_kl: kl_unscaled,
            log_ratio: per_row_ratio.map(|v| g.value(v).to_vec()),
            traces,
        })
    }

    /// Noise-free filtered beliefs for steps `0..data.t`: means of the
    /// posterior chain with zero Gumbel noise on the switches. In smoothing
    /// mode the switch encoder sees the whole supplied prefix.
    pub fn filter(&self, store: &ParamStore, data: &SeqData, temp_factor: f64) -> Result<Vec<FilterState>, ModelError> {
        self.check_data(data)?;
        if data.t < self.cfg.k_init {
            return Err(ModelError::TooShort {
                len: data.t,
                min: self.cfg.k_init,
            });
        }
        let n = data.n;
        let (n_x, n_z, s_dim) = (self.cfg.n_x, self.cfg.n_z, self.s_dim());
        let lambda_prior = self.cfg.lambda_prior * temp_factor;
        let lambda_post = self.cfg.lambda_post * temp_factor;
        let mut noise = Noise::zeros(n);

        // Switch-encoder outputs only need the observation features.
        let s_meas_vals: Vec<Vec<f64>> = {
            let mut g = Graph::new();
            let mut feats = Vec::with_capacity(data.t);
            for t in 0..data.t {
                let x = g.constant(n, n_x, data.x_at(t))?;
                feats.push(self.enc_z.forward(&mut g, store, x)?.0);
            }
            let us = self.controls(&mut g, data)?;
            let outs = self.enc_s.encode(&mut g, store, &feats, &us)?;
            outs.iter().map(|&v| g.value(v).to_vec()).collect()
        };

        let mut states = Vec::with_capacity(data.t);
        let mut g = Graph::new();
        let xs: Vec<Var> = (0..self.cfg.k_init)
            .map(|t| g.constant(n, n_x, data.x_at(t)))
            .collect::<Result<_, _>>()?;
        let us = self.controls(&mut g, &data.window(&(0..n).collect::<Vec<_>>(), 0, self.cfg.k_init))?;
        let eps = g.full(n, self.init.n_h, 0.0);
        let init = self.init.infer(&mut g, store, &xs, &us, eps)?;
        let s2_out = g.value(init.s2_out).to_vec();
        states.push(FilterState {
            t: 0,
            z: g.value(init.z1).to_vec(),
            s: uniform_switch(self.cfg.switch_mode, n, s_dim),
        });

        for t in 1..data.t {
            let mut g = Graph::new();
            let prev = states.last().expect("non-empty");
            let z_prev = g.constant(n, n_z, prev.z.clone())?;
            let s_prev = g.constant(n, s_dim, prev.s.clone())?;
            let u_prev = if data.d_u > 0 {
                Some(g.constant(n, data.d_u, data.u_at(t - 1))?)
            } else {
                None
            };
            let s_prev = if t == 1 { None } else { Some(s_prev) };
            let (prior, trans_out) = self.switch_prior(&mut g, store, t, z_prev, s_prev, u_prev, lambda_prior)?;
            let trans_out = match trans_out {
                Some(v) => v,
                None => g.constant(n, s2_out.len() / n, s2_out.clone())?,
            };
            let raw = g.constant(n, 2 * s_dim, s_meas_vals[t].clone())?;
            let meas = self.enc_s.interpret(&mut g, raw)?;
            let sw = self.switch_step(&mut g, store, &mut noise, trans_out, meas, prior, lambda_post, false, false)?;
            let x = g.constant(n, n_x, data.x_at(t))?;
            let (_, q_meas) = self.enc_z.forward(&mut g, store, x)?;
            let (q_z, _) = infer_z(&mut g, store, &q_meas, z_prev, sw.weights, u_prev, &self.bank, self.cfg.switch_mode)?;
            check_finite(&g, q_z.mean, "filter_z", t)?;
            states.push(FilterState {
                t,
                z: g.value(q_z.mean).to_vec(),
                s: g.value(sw.sample).to_vec(),
            });
        }
        Ok(states)
    }

    /// Roll the generative model forward `horizon` steps from `start`
    /// (rows may come from different sequences and times). `controls[j]` is
    /// the `[N·d_u]` control applied on the transition into step `j+1`
    /// after the start. Switches take the prior's noise-free value unless
    /// `noise` is given (sampling mode). Returns decoder means per step.
    pub fn rollout(
        &self,
        store: &ParamStore,
        start: &FilterState,
        start_times: &[usize],
        controls: &[Vec<f64>],
        horizon: usize,
        temp_factor: f64,
        mut noise: Option<&mut Noise>,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if horizon == 0 {
            return Err(ModelError::Horizon);
        }
        let (n_z, s_dim) = (self.cfg.n_z, self.s_dim());
        let n = start.z.len() / n_z;
        let lambda_prior = self.cfg.lambda_prior * temp_factor;
        let mut z = start.z.clone();
        let mut s = start.s.clone();
        let mut out = Vec::with_capacity(horizon);
        let mut zero_noise = Noise::zeros(n);
        for step in 0..horizon {
            let mut g = Graph::new();
            let z_prev = g.constant(n, n_z, z.clone())?;
            let s_prev = g.constant(n, s_dim, s.clone())?;
            let u_prev = if self.cfg.n_u > 0 {
                Some(g.constant(n, self.cfg.n_u, controls[step].clone())?)
            } else {
                None
            };
            // Rows starting at t = 0 have no previous switch; their next prior is the uniform one.
            let first_rows: Vec<bool> = start_times.iter().map(|&t| t + step == 0).collect();
            let out_logits = self.trans_s.logits(&mut g, store, z_prev, s_prev, u_prev)?;
            let out_logits = if first_rows.iter().any(|&b| b) {
                let mut v = g.value(out_logits).to_vec();
                let w = g.cols(out_logits);
                for (i, &first) in first_rows.iter().enumerate() {
                    if first {
                        v[i * w..(i + 1) * w].iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                g.constant(n, w, v)?
            } else {
                out_logits
            };
            let prior = switch_dist_from_output(&mut g, out_logits, self.cfg.switch_mode, s_dim, lambda_prior)?;
            let nz: &mut Noise = match noise.as_deref_mut() {
                Some(r) => r,
                None => &mut zero_noise,
            };
            let sample = match prior {
                SwitchDist::Concrete(p) => {
                    let gum = nz.gumbel(&mut g, 1, s_dim);
                    sample_concrete(&mut g, &p, gum)?
                }
                SwitchDist::Bernoulli(p) => {
                    let l = nz.logistic(&mut g, 1, s_dim);
                    sample_relaxed_bernoulli(&mut g, &p, l)?
                }
                SwitchDist::Gaussian(p) => {
                    let e = nz.normal(&mut g, s_dim);
                    sample_gaussian(&mut g, &p, e)?
                }
            };
            let weights = self.weights(&mut g, store, sample)?;
            let tr = transition_z(&mut g, store, z_prev, u_prev, weights, &self.bank, self.cfg.switch_mode)?;
            let z_next = match noise.as_deref_mut() {
                Some(r) => {
                    let e = r.normal(&mut g, n_z);
                    sample_gaussian(&mut g, &tr.prior(), e)?
                }
                None => tr.mean,
            };
            let x_hat = self.decoder.mean(&mut g, store, z_next)?;
            check_finite(&g, x_hat, "prediction", step + 1)?;
            out.push(g.value(x_hat).to_vec());
            z = g.value(z_next).to_vec();
            s = g.value(sample).to_vec();
        }
        Ok(out)
    }

    /// Decoder mean for latent states `[N·n_z]`.
    pub fn decode_mean(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let n = z.len() / self.cfg.n_z;
        let zv = g.constant(n, self.cfg.n_z, z.to_vec())?;
        let m = self.decoder.mean(&mut g, store, zv)?;
        Ok(g.value(m).to_vec())
    }

    /// Filter the first `k` observations, then predict `x̂_{k..k+n}` by rolling
    /// the generative model forward. `data.t` must cover the controls used by
    /// the rollout (`k + n − 1` steps).
    pub fn predict(
        &self,
        store: &ParamStore,
        data: &SeqData,
        k: usize,
        horizon: usize,
        temp_factor: f64,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if horizon == 0 {
            return Err(ModelError::Horizon);
        }
        if data.t < k + horizon - 1 || k < self.cfg.k_init {
            return Err(ModelError::TooShort {
                len: data.t,
                min: (k + horizon - 1).max(self.cfg.k_init),
            });
        }
        let rows: Vec<usize> = (0..data.n).collect();
        let prefix = data.window(&rows, 0, k);
        let states = self.filter(store, &prefix, temp_factor)?;
        let last = states.last().expect("k >= 1");
        let controls: Vec<Vec<f64>> = (0..horizon)
            .map(|j| data.u_at(k - 1 + j))
            .collect();
        let times = vec![k - 1; data.n];
        self.rollout(store, last, &times, &controls, horizon, temp_factor, None)
    }
}

fn uniform_switch(mode: SwitchMode, n: usize, s_dim: usize) -> Vec<f64> {
    match mode {
        SwitchMode::ConcreteSoftmax => vec![1.0 / s_dim as f64; n * s_dim],
        SwitchMode::RelaxedBernoulli => vec![0.5; n * s_dim],
        SwitchMode::GaussianHierarchical => vec![0.0; n * s_dim],
    }
}

fn check_finite(g: &Graph, v: Var, term: &'static str, step: usize) -> Result<(), ModelError> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { term, step })
    }
}
