//! Flat `key = value` run configuration. Each environment has a preset; a
//! file names its `env` and overrides any other key. Unknown keys are
//! rejected. `#` starts a comment.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::SwitchMode;
use crate::envs::{Axis, BoxWorld, FhnParams, Wall, IMAGE_SIDE};
use crate::model::{DecoderKind, SvbfConfig};
use crate::train::TrainSettings;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {msg}")]
    BadValue { key: String, msg: String },
    #[error("key '{0}' given twice")]
    Duplicate(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Fhn,
    /// Single ball, position observations.
    Box,
    /// Several balls with inner walls.
    Maze,
    /// Single ball rendered to 32×32 frames.
    Image,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Fhn => "fhn",
            EnvKind::Box => "box",
            EnvKind::Maze => "maze",
            EnvKind::Image => "image",
        })
    }
}

impl FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fhn" => Ok(EnvKind::Fhn),
            "box" => Ok(EnvKind::Box),
            "maze" => Ok(EnvKind::Maze),
            "image" => Ok(EnvKind::Image),
            other => Err(format!("unknown env '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub n_traj: usize,
    pub t_len: usize,
    /// Held-out trajectories generated from a separate stream (0: none).
    pub n_test: usize,
    pub fhn: FhnParams,
    pub world: BoxWorld,
    pub model: SvbfConfig,
    pub train: TrainSettings,
    pub horizons: Vec<usize>,
    pub dt_list: Vec<f64>,
}

impl RunConfig {
    /// Defaults per environment. Widths, batch sizes and step budgets are
    /// shrunk to desk scale for the vector environments.
    pub fn preset(env: EnvKind) -> Self {
        let base_model = SvbfConfig::default();
        let base_train = TrainSettings::default();
        match env {
            EnvKind::Fhn => Self {
                env,
                seed: 0,
                n_traj: 100,
                t_len: 430,
                n_test: 0,
                fhn: FhnParams::default(),
                world: BoxWorld::default(),
                model: SvbfConfig {
                    n_x: 2,
                    n_u: 1,
                    n_z: 4,
                    n_s: 8,
                    lambda_post: 0.67,
                    anneal_rate: 0.95,
                    enc_hidden: 64,
                    dec_hidden: 64,
                    trans_hidden: 64,
                    init_hidden: 64,
                    ..base_model
                },
                train: TrainSettings {
                    steps: 3000,
                    batch_size: 32,
                    base_lr: 5e-3,
                    lr_decay_rate: 0.95,
                    window: 50,
                    train_len: 400,
                    ..base_train
                },
                horizons: vec![5, 10, 30],
                dt_list: Vec::new(),
            },
            EnvKind::Box => Self {
                env,
                seed: 0,
                n_traj: 2000,
                t_len: 20,
                n_test: 200,
                fhn: FhnParams::default(),
                world: BoxWorld::default(),
                model: SvbfConfig {
                    n_x: 2,
                    n_u: 2,
                    n_z: 8,
                    n_s: 8,
                    lambda_post: 0.75,
                    anneal_rate: 0.97,
                    enc_hidden: 64,
                    dec_hidden: 64,
                    trans_hidden: 64,
                    init_hidden: 64,
                    ..base_model
                },
                train: TrainSettings {
                    steps: 3000,
                    batch_size: 64,
                    base_lr: 5e-3,
                    lr_decay_rate: 0.97,
                    ..base_train
                },
                horizons: vec![1, 5, 10],
                dt_list: vec![0.002, 0.01, 0.04, 0.1],
            },
            EnvKind::Maze => Self {
                env,
                seed: 0,
                n_traj: 5000,
                t_len: 20,
                n_test: 500,
                fhn: FhnParams::default(),
                world: BoxWorld {
                    n_balls: 3,
                    walls: BoxWorld::maze_walls(),
                    ..BoxWorld::default()
                },
                model: SvbfConfig {
                    n_x: 6,
                    n_u: 6,
                    n_z: 32,
                    n_s: 16,
                    switch_mode: SwitchMode::RelaxedBernoulli,
                    lambda_post: 0.75,
                    anneal_rate: 0.97,
                    ..base_model
                },
                train: TrainSettings {
                    steps: 5000,
                    batch_size: 256,
                    base_lr: 5e-4,
                    lr_decay_rate: 0.97,
                    ..base_train
                },
                horizons: vec![1, 5, 10],
                dt_list: Vec::new(),
            },
            EnvKind::Image => Self {
                env,
                seed: 0,
                n_traj: 5000,
                t_len: 20,
                n_test: 200,
                fhn: FhnParams::default(),
                world: BoxWorld {
                    radius: 0.2,
                    ..BoxWorld::default()
                },
                model: SvbfConfig {
                    n_x: IMAGE_SIDE * IMAGE_SIDE,
                    n_u: 2,
                    n_z: 8,
                    n_s: 8,
                    lambda_post: 0.67,
                    anneal_rate: 0.98,
                    decoder: DecoderKind::Bernoulli,
                    enc_hidden: 256,
                    dec_hidden: 256,
                    ..base_model
                },
                train: TrainSettings {
                    steps: 10000,
                    batch_size: 256,
                    base_lr: 5e-4,
                    lr_decay_rate: 0.98,
                    ..base_train
                },
                horizons: vec![1, 5, 10],
                dt_list: Vec::new(),
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if pairs.iter().any(|(p, _)| *p == k) {
                return Err(ConfigError::Duplicate(k));
            }
            pairs.push((k, v));
        }
        let env = match pairs.iter().find(|(k, _)| k == "env") {
            Some((_, v)) => v.parse().map_err(|msg| ConfigError::BadValue {
                key: "env".into(),
                msg,
            })?,
            None => return Err(ConfigError::Invalid("missing required key 'env'".into())),
        };
        let mut cfg = Self::preset(env);
        for (k, v) in &pairs {
            if k != "env" {
                cfg.set(k, v)?;
            }
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Derive observation/control sizes from the environment and validate.
    pub fn finalize(&mut self) -> Result<(), ConfigError> {
        let (n_x, n_u) = match self.env {
            EnvKind::Fhn => (2, 1),
            EnvKind::Box | EnvKind::Maze => (2 * self.world.n_balls, 2 * self.world.n_balls),
            EnvKind::Image => (IMAGE_SIDE * IMAGE_SIDE, 2),
        };
        self.model.n_x = n_x;
        self.model.n_u = n_u;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.env == EnvKind::Image && self.model.decoder != DecoderKind::Bernoulli {
            return Err(ConfigError::Invalid("image observations need the bernoulli decoder".into()));
        }
        if self.n_traj == 0 || self.t_len < 2 {
            return Err(ConfigError::Invalid("need n_traj >= 1 and t_len >= 2".into()));
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(ConfigError::Invalid("horizons must be positive".into()));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                msg: e.to_string(),
            })
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
        where
            T::Err: fmt::Display,
        {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| p(key, s.trim())).collect()
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let f = &mut self.fhn;
        let w = &mut self.world;
        match key {
            "seed" => self.seed = p(key, v)?,
            "n_traj" => self.n_traj = p(key, v)?,
            "t_len" => self.t_len = p(key, v)?,
            "n_test" => self.n_test = p(key, v)?,
            "horizons" => self.horizons = list(key, v)?,
            "dt_list" => self.dt_list = list(key, v)?,

            "n_z" => m.n_z = p(key, v)?,
            "n_s" => m.n_s = p(key, v)?,
            "n_systems" => m.n_systems = p(key, v)?,
            "switch_mode" => m.switch_mode = p(key, v)?,
            "inference_mode" => m.inference_mode = p(key, v)?,
            "lambda_prior" => m.lambda_prior = p(key, v)?,
            "lambda_post" => m.lambda_post = p(key, v)?,
            "beta" => m.beta = p(key, v)?,
            "anneal_init" => m.anneal_init = p(key, v)?,
            "anneal_rate" => m.anneal_rate = p(key, v)?,
            "anneal_every" => m.anneal_every = p(key, v)?,
            "decoder" => m.decoder = p(key, v)?,
            "k_init" => m.k_init = p(key, v)?,
            "mc_kl_samples" => m.mc_kl_samples = p(key, v)?,
            "enc_hidden" => m.enc_hidden = p(key, v)?,
            "enc_blocks" => m.enc_blocks = p(key, v)?,
            "dec_hidden" => m.dec_hidden = p(key, v)?,
            "dec_blocks" => m.dec_blocks = p(key, v)?,
            "trans_hidden" => m.trans_hidden = p(key, v)?,
            "trans_blocks" => m.trans_blocks = p(key, v)?,
            "init_hidden" => m.init_hidden = p(key, v)?,
            "init_blocks" => m.init_blocks = p(key, v)?,
            "rnn_hidden" => m.rnn_hidden = p(key, v)?,
            "predict_sample_switch" => m.predict_sample_switch = p(key, v)?,

            "steps" => t.steps = p(key, v)?,
            "batch_size" => t.batch_size = p(key, v)?,
            "base_lr" => t.base_lr = p(key, v)?,
            "lr_decay_rate" => t.lr_decay_rate = p(key, v)?,
            "lr_decay_every" => t.lr_decay_every = p(key, v)?,
            "clip_norm" => t.clip_norm = p(key, v)?,
            "window" => t.window = p(key, v)?,
            "train_len" => t.train_len = p(key, v)?,
            "log_every" => t.log_every = p(key, v)?,

            "fhn_a" => f.a = p(key, v)?,
            "fhn_b" => f.b = p(key, v)?,
            "fhn_tau" => f.tau = p(key, v)?,
            "fhn_i_mean" => f.i_mean = p(key, v)?,
            "fhn_i_var" => f.i_var = p(key, v)?,
            "fhn_dt" => f.dt = p(key, v)?,
            "fhn_substeps" => f.substeps = p(key, v)?,
            "fhn_init_range" => f.init_range = p(key, v)?,
            "fhn_eval_tail" => f.eval_tail = p(key, v)?,

            "box_bound" => w.bound = p(key, v)?,
            "n_balls" => w.n_balls = p(key, v)?,
            "radius" => w.radius = p(key, v)?,
            "physics_dt" => w.dt = p(key, v)?,
            "substeps" => w.substeps = p(key, v)?,
            "control_gain" => w.control_gain = p(key, v)?,
            "max_speed" => w.max_speed = p(key, v)?,
            "init_speed" => w.init_speed = p(key, v)?,
            "walls" => w.walls = parse_walls(v).map_err(|msg| ConfigError::BadValue { key: key.into(), msg })?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Canonical text form listing every key; `parse(to_text())` reproduces
    /// the configuration.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let f = &self.fhn;
        let w = &self.world;
        let join = |v: &[String]| v.join(",");
        let entries: Vec<(&str, String)> = vec![
            ("env", self.env.to_string()),
            ("seed", self.seed.to_string()),
            ("n_traj", self.n_traj.to_string()),
            ("t_len", self.t_len.to_string()),
            ("n_test", self.n_test.to_string()),
            ("horizons", join(&self.horizons.iter().map(|h| h.to_string()).collect::<Vec<_>>())),
            ("dt_list", join(&self.dt_list.iter().map(|h| h.to_string()).collect::<Vec<_>>())),
            ("n_z", m.n_z.to_string()),
            ("n_s", m.n_s.to_string()),
            ("n_systems", m.n_systems.to_string()),
            ("switch_mode", m.switch_mode.to_string()),
            ("inference_mode", m.inference_mode.to_string()),
            ("lambda_prior", m.lambda_prior.to_string()),
            ("lambda_post", m.lambda_post.to_string()),
            ("beta", m.beta.to_string()),
            ("anneal_init", m.anneal_init.to_string()),
            ("anneal_rate", m.anneal_rate.to_string()),
            ("anneal_every", m.anneal_every.to_string()),
            ("decoder", m.decoder.to_string()),
            ("k_init", m.k_init.to_string()),
            ("mc_kl_samples", m.mc_kl_samples.to_string()),
            ("enc_hidden", m.enc_hidden.to_string()),
            ("enc_blocks", m.enc_blocks.to_string()),
            ("dec_hidden", m.dec_hidden.to_string()),
            ("dec_blocks", m.dec_blocks.to_string()),
            ("trans_hidden", m.trans_hidden.to_string()),
            ("trans_blocks", m.trans_blocks.to_string()),
            ("init_hidden", m.init_hidden.to_string()),
            ("init_blocks", m.init_blocks.to_string()),
            ("rnn_hidden", m.rnn_hidden.to_string()),
            ("predict_sample_switch", m.predict_sample_switch.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("lr_decay_rate", t.lr_decay_rate.to_string()),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("window", t.window.to_string()),
            ("train_len", t.train_len.to_string()),
            ("log_every", t.log_every.to_string()),
            ("fhn_a", f.a.to_string()),
            ("fhn_b", f.b.to_string()),
            ("fhn_tau", f.tau.to_string()),
            ("fhn_i_mean", f.i_mean.to_string()),
            ("fhn_i_var", f.i_var.to_string()),
            ("fhn_dt", f.dt.to_string()),
            ("fhn_substeps", f.substeps.to_string()),
            ("fhn_init_range", f.init_range.to_string()),
            ("fhn_eval_tail", f.eval_tail.to_string()),
            ("box_bound", w.bound.to_string()),
            ("n_balls", w.n_balls.to_string()),
            ("radius", w.radius.to_string()),
            ("physics_dt", w.dt.to_string()),
            ("substeps", w.substeps.to_string()),
            ("control_gain", w.control_gain.to_string()),
            ("max_speed", w.max_speed.to_string()),
            ("init_speed", w.init_speed.to_string()),
            ("walls", format_walls(&w.walls)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    /// SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// `none`, `u` (the default maze), or `axis:at:from:to` entries separated by
/// `;` where `axis` is `x` (vertical segment) or `y` (horizontal).
pub fn parse_walls(v: &str) -> Result<Vec<Wall>, String> {
    match v {
        "" | "none" => return Ok(Vec::new()),
        "u" => return Ok(BoxWorld::maze_walls()),
        _ => {}
    }
    v.split(';')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 4 {
                return Err(format!("wall '{item}' is not axis:at:from:to"));
            }
            let axis = match parts[0] {
                "x" => Axis::X,
                "y" => Axis::Y,
                other => return Err(format!("wall axis '{other}' is not x or y")),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
            Ok(Wall {
                axis,
                at: num(parts[1])?,
                from: num(parts[2])?,
                to: num(parts[3])?,
            })
        })
        .collect()
}

pub fn format_walls(walls: &[Wall]) -> String {
    if walls.is_empty() {
        return "none".into();
    }
    walls
        .iter()
        .map(|w| {
            let a = match w.axis {
                Axis::X => "x",
                Axis::Y => "y",
            };
            format!("{a}:{}:{}:{}", w.at, w.from, w.to)
        })
        .collect::<Vec<_>>()
        .join(";")
}
