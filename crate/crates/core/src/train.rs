//! Minibatch training: per-step batch selection, annealed temperatures,
//! Adam with a stepwise decaying learning rate.
//!
//! Every random choice at step `k` is drawn from streams keyed by
//! `(seed, k, …)`, so a run resumed from a checkpoint at step `k` continues
//! exactly as the uninterrupted run would.

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::diff::{adam_step, lr_schedule, DiffError, Graph, OptimState, ParamStore};
use crate::model::{ModelError, Noise, SeqData, Svbf, UnrollOptions};
use crate::rng;

const TAG_BATCH: u64 = 0xba7c;
const TAG_NOISE: u64 = 0x0153;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: u64, detail: String },
    #[error("invalid training settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Diff(DiffError),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Diff(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_every: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Length of the random sub-window trained on per sequence; 0 uses the
    /// whole training span.
    pub window: usize,
    /// Leading steps of each sequence available for training; 0 means all.
    pub train_len: usize,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            base_lr: 5e-4,
            lr_decay_rate: 0.95,
            lr_decay_every: 2000,
            clip_norm: 0.0,
            window: 0,
            train_len: 0,
            seed: 0,
            log_every: 100,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub kl_z: f64,
    pub kl_s: f64,
    pub recon: f64,
    pub lr: f64,
    pub lambda_post: f64,
    pub lambda_prior: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,loss,kl_z,kl_s,recon,lr,lambda_post,lambda_prior";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6},{:.6}",
            self.step, self.loss, self.kl_z, self.kl_s, self.recon, self.lr, self.lambda_post, self.lambda_prior
        )
    }
}

pub struct Trainer {
    pub model: Svbf,
    pub params: ParamStore,
    pub optim: OptimState,
    pub settings: TrainSettings,
}

impl Trainer {
    pub fn new(model: Svbf, params: ParamStore, settings: TrainSettings) -> Self {
        let mut optim = OptimState::new(&params, settings.base_lr, settings.lr_decay_rate, settings.lr_decay_every);
        optim.clip_norm = settings.clip_norm;
        Self {
            model,
            params,
            optim,
            settings,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step
    }

    fn span(&self, data: &SeqData) -> (usize, usize) {
        let train_len = match self.settings.train_len {
            0 => data.t,
            n => n.min(data.t),
        };
        let window = match self.settings.window {
            0 => train_len,
            w => w.min(train_len),
        };
        (train_len, window)
    }

    /// Minibatch and per-row noise seeds used at `step`.
    pub fn batch_for_step(&self, data: &SeqData, step: u64) -> (SeqData, Vec<u64>) {
        let seed = self.settings.seed;
        let mut r = rng::stream(seed, &[TAG_BATCH, step]);
        let bs = self.settings.batch_size;
        let rows: Vec<usize> = if bs <= data.n {
            index::sample(&mut r, data.n, bs).into_vec()
        } else {
            (0..bs).map(|_| r.gen_range(0..data.n)).collect()
        };
        let (train_len, window) = self.span(data);
        let mut x = Vec::with_capacity(bs * window * data.d_x);
        let mut u = Vec::with_capacity(bs * window * data.d_u);
        for &row in &rows {
            let start = r.gen_range(0..=train_len - window);
            let w = data.window(&[row], start, window);
            x.extend(w.x);
            u.extend(w.u);
        }
        let batch = SeqData {
            n: rows.len(),
            t: window,
            d_x: data.d_x,
            d_u: data.d_u,
            x,
            u,
        };
        let seeds = (0..rows.len()).map(|j| rng::derive(seed, &[TAG_NOISE, step, j as u64])).collect();
        (batch, seeds)
    }

    /// Loss and ELBO components at the current parameters for the batch of
    /// `step`, without updating.
    pub fn evaluate_step(&self, data: &SeqData, step: u64) -> Result<LogRow, TrainError> {
        let (batch, seeds) = self.batch_for_step(data, step);
        let mut g = Graph::new();
        let mut noise = Noise::from_seeds(&seeds);
        let factor = self.model.cfg.anneal_factor(step);
        let out = self
            .model
            .unroll(&mut g, &self.params, &batch, &mut noise, factor, UnrollOptions::default())?;
        Ok(self.row(step, g.scalar(out.loss), out.kl_z + out.kl_h, out.kl_s, out.recon))
    }

    fn row(&self, step: u64, loss: f64, kl_z: f64, kl_s: f64, recon: f64) -> LogRow {
        let factor = self.model.cfg.anneal_factor(step);
        LogRow {
            step,
            loss,
            kl_z,
            kl_s,
            recon,
            lr: lr_schedule(step, &self.optim),
            lambda_post: self.model.cfg.lambda_post * factor,
            lambda_prior: self.model.cfg.lambda_prior * factor,
        }
    }

    /// One optimization step. On a numeric failure the parameters and
    /// optimizer state are left untouched.
    pub fn step(&mut self, data: &SeqData) -> Result<LogRow, TrainError> {
        let step = self.optim.step;
        let (batch, seeds) = self.batch_for_step(data, step);
        let mut g = Graph::new();
        let mut noise = Noise::from_seeds(&seeds);
        let factor = self.model.cfg.anneal_factor(step);
        let out = self
            .model
            .unroll(&mut g, &self.params, &batch, &mut noise, factor, UnrollOptions::default())
            .map_err(|e| match e {
                ModelError::NonFinite { term, step: t } => TrainError::Numeric {
                    step,
                    detail: format!("{term} at time {t}"),
                },
                other => TrainError::Model(other),
            })?;
        let grads = g.grad(out.loss, &self.params).map_err(|e| match e {
            DiffError::NonFinite { node, op } => TrainError::Numeric {
                step,
                detail: format!("node {node} ({op})"),
            },
            other => TrainError::Diff(other),
        })?;
        if grads.values().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Numeric {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let row = self.row(step, g.scalar(out.loss), out.kl_z + out.kl_h, out.kl_s, out.recon);
        adam_step(&mut self.params, &grads, &mut self.optim)?;
        Ok(row)
    }

    /// Train until the step counter reaches `until`, calling `log` every
    /// `log_every` steps (and on the first step).
    pub fn run(&mut self, data: &SeqData, until: u64, mut log: impl FnMut(&LogRow)) -> Result<(), TrainError> {
        if data.n == 0 {
            return Err(TrainError::Settings("empty dataset".into()));
        }
        while self.optim.step < until {
            let row = self.step(data)?;
            if self.settings.log_every > 0 && row.step % self.settings.log_every == 0 {
                log(&row);
            }
        }
        Ok(())
    }
}
