//! Glue from a [`RunConfig`] to datasets, trained models and reports. The
//! CLI and the acceptance suite both go through here so a given config and
//! seed produce the same bytes either way.

use thiserror::Error;

use crate::config::{EnvKind, RunConfig};
use crate::diff::ParamStore;
use crate::envs::{box_generate, fhn_generate, image_generate, EnvError, TrajectoryBatch};
use crate::dynamics::SwitchMode;
use crate::envs::BoxWorld;
use crate::eval::{self, DtStudy, EvalError, MetricReport, Starts};
use crate::model::{ModelError, SeqData, Svbf};
use crate::rng;
use crate::train::{LogRow, TrainError, Trainer};

const TAG_DATA: u64 = 0xda7a;
const TAG_INIT: u64 = 0x1417;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Generate the training or held-out split. FHN has no separate test set:
/// its held-out part is the tail of every trajectory.
pub fn generate(cfg: &RunConfig, split: Split) -> Result<TrajectoryBatch, ExperimentError> {
    let (n, id) = match split {
        Split::Train => (cfg.n_traj, 0),
        Split::Test if cfg.env == EnvKind::Fhn => (cfg.n_traj, 0),
        Split::Test => (cfg.n_test, 1),
    };
    if n == 0 {
        return Err(ExperimentError::Usage("n_test = 0: no held-out split configured".into()));
    }
    let seed = rng::derive(cfg.seed, &[TAG_DATA, id]);
    Ok(match cfg.env {
        EnvKind::Fhn => fhn_generate(&cfg.fhn, n, cfg.t_len, seed)?,
        EnvKind::Box | EnvKind::Maze => box_generate(&cfg.world, n, cfg.t_len, seed)?,
        EnvKind::Image => image_generate(&cfg.world, n, cfg.t_len, seed)?,
    })
}

/// Freshly initialized model and parameters for `cfg`.
pub fn init_model(cfg: &RunConfig) -> Result<(Svbf, ParamStore), ExperimentError> {
    Ok(Svbf::new(cfg.model.clone(), rng::derive(cfg.seed, &[TAG_INIT]))?)
}

pub fn check_dims(cfg: &RunConfig, data: &TrajectoryBatch) -> Result<(), ExperimentError> {
    if data.d_x != cfg.model.n_x || data.d_u != cfg.model.n_u {
        return Err(ExperimentError::Usage(format!(
            "dataset has d_x={}, d_u={} but the config expects {}, {}",
            data.d_x, data.d_u, cfg.model.n_x, cfg.model.n_u
        )));
    }
    Ok(())
}

pub fn trainer(cfg: &RunConfig) -> Result<Trainer, ExperimentError> {
    let (model, params) = init_model(cfg)?;
    Ok(Trainer::new(model, params, cfg.train_settings()))
}

/// Train a fresh model to the configured step budget.
pub fn train(cfg: &RunConfig, data: &SeqData, log: impl FnMut(&LogRow)) -> Result<Trainer, ExperimentError> {
    let mut tr = trainer(cfg)?;
    tr.run(data, cfg.train.steps, log)?;
    Ok(tr)
}

/// Prediction starts for a horizon: FHN predicts only inside the held-out
/// tail (starting from the last training step), other environments from
/// every admissible offset.
pub fn starts_for(cfg: &RunConfig, model: &Svbf, t_len: usize, h_max: usize) -> Result<Starts, ExperimentError> {
    if cfg.env == EnvKind::Fhn {
        let first = t_len.saturating_sub(cfg.fhn.eval_tail + 1);
        if first + h_max >= t_len || first + 1 < model.cfg.k_init {
            return Err(ExperimentError::Usage(format!(
                "horizon {h_max} does not fit the {}-step evaluation tail",
                cfg.fhn.eval_tail
            )));
        }
        return Ok(Starts {
            first,
            last: t_len - 1 - h_max,
        });
    }
    Ok(Starts::all(model, t_len, h_max)?)
}

fn stamp(mut r: MetricReport, cfg: &RunConfig) -> MetricReport {
    r.fingerprint = cfg.fingerprint();
    r.seed = cfg.seed;
    r
}

pub fn mse_report(
    cfg: &RunConfig,
    model: &Svbf,
    params: &ParamStore,
    data: &SeqData,
    horizons: &[usize],
    temp_factor: f64,
) -> Result<MetricReport, ExperimentError> {
    let h_max = horizons.iter().copied().max().unwrap_or(0);
    let starts = starts_for(cfg, model, data.t, h_max)?;
    let r = eval::n_step_mse(model, params, data, horizons, Some(starts), temp_factor)?;
    Ok(stamp(r, cfg))
}

/// R² per horizon. Each horizon uses every start that fits it, so short
/// horizons are not restricted by the longest one.
pub fn r2_report(
    cfg: &RunConfig,
    model: &Svbf,
    params: &ParamStore,
    data: &SeqData,
    horizons: &[usize],
    temp_factor: f64,
) -> Result<MetricReport, ExperimentError> {
    let mut vals = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 {
            return Err(ExperimentError::Model(ModelError::Horizon));
        }
        let starts = starts_for(cfg, model, data.t, h)?;
        let preds = eval::predict_all(model, params, data, starts, h, temp_factor)?;
        vals.push(eval::prediction_r2(&preds, data, &[h])?[0]);
    }
    Ok(stamp(
        MetricReport {
            metric: "r2".into(),
            horizons: horizons.to_vec(),
            columns: vec![("model".into(), vals)],
            fingerprint: String::new(),
            seed: 0,
        },
        cfg,
    ))
}

/// Depth-limited tree probe from filtered switch states to wall-contact
/// flags (any axis, any ball) of the interval leading into each step.
pub fn f1_report(
    cfg: &RunConfig,
    model: &Svbf,
    params: &ParamStore,
    batch: &TrajectoryBatch,
    temp_factor: f64,
) -> Result<MetricReport, ExperimentError> {
    let col = batch.aux("collisions")?;
    let data = batch.to_seq_data();
    let states = model.filter(params, &data, temp_factor)?;
    let s_dim = model.s_dim();
    let mut s = Vec::new();
    let mut flags = Vec::new();
    // Skip t = 0: no switch is inferred for the first step.
    for i in 0..data.n {
        for st in states.iter().skip(1) {
            s.extend_from_slice(&st.s[i * s_dim..(i + 1) * s_dim]);
            let base = (i * data.t + st.t) * col.width;
            flags.push(col.data[base..base + col.width].iter().any(|&c| c > 0.5));
        }
    }
    let f1 = eval::f1_probe(&s, s_dim, &flags)?;
    Ok(stamp(
        MetricReport {
            metric: "f1".into(),
            horizons: vec![0],
            columns: vec![("model".into(), vec![f1])],
            fingerprint: String::new(),
            seed: 0,
        },
        cfg,
    ))
}

/// Discretization sweep over `dt_list` for both continuous switch types.
/// The physics step is the smallest Δt, so every interval is a whole number
/// of physics steps.
pub fn dt_study_setup(cfg: &RunConfig) -> Result<DtStudy, ExperimentError> {
    let min = cfg.dt_list.iter().copied().fold(f64::INFINITY, f64::min);
    if cfg.dt_list.is_empty() || !(min > 0.0) {
        return Err(ExperimentError::Usage("dt_list must hold positive values".into()));
    }
    Ok(DtStudy {
        world: BoxWorld {
            dt: min,
            ..cfg.world.clone()
        },
        dts: cfg.dt_list.clone(),
        modes: vec![SwitchMode::GaussianHierarchical, SwitchMode::ConcreteSoftmax],
        model: cfg.model.clone(),
        train: cfg.train_settings(),
        n_train: cfg.n_traj,
        n_test: cfg.n_test.max(1),
        t_len: cfg.t_len,
        seed: cfg.seed,
    })
}
