//! Prediction metrics and probes over trained models.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::diff::nn::{GruCell, Linear};
use crate::diff::{adam_step, DiffError, Graph, OptimState, ParamStore};
use crate::dynamics::SwitchMode;
use crate::envs::{box_generate, BoxWorld, EnvError};
use crate::inference::InferenceMode;
use crate::model::{FilterState, ModelError, SeqData, Svbf, SvbfConfig};
use crate::train::{TrainError, TrainSettings, Trainer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("horizon {horizon} from start {start} exceeds sequence length {len}")]
    Horizon { horizon: usize, start: usize, len: usize },
    #[error("no valid prediction start offsets")]
    NoStarts,
    #[error("target dimension {0} has zero variance")]
    ZeroVariance(usize),
    #[error("probe data has a single class")]
    SingleClass,
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
    #[error("ground truth is not binary")]
    NonBinary,
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// One column of values per named series, one row per horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: String,
    pub horizons: Vec<usize>,
    pub columns: Vec<(String, Vec<f64>)>,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricReport {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,horizon");
        for (name, _) in &self.columns {
            out.push(',');
            out.push_str(name);
        }
        out.push_str(",seed,fingerprint\n");
        for (i, h) in self.horizons.iter().enumerate() {
            write!(out, "{},{}", self.metric, h).expect("string write");
            for (_, vals) in &self.columns {
                write!(out, ",{:.6e}", vals[i]).expect("string write");
            }
            writeln!(out, ",{},{}", self.seed, self.fingerprint).expect("string write");
        }
        out
    }
}

/// Inclusive range of prediction start times; the last observed step before
/// the first prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Starts {
    pub first: usize,
    pub last: usize,
}

impl Starts {
    /// Every start from `k − 1` that leaves room for `h_max` steps.
    pub fn all(model: &Svbf, t_len: usize, h_max: usize) -> Result<Self, EvalError> {
        let first = model.cfg.k_init - 1;
        if t_len < h_max + 1 || t_len - 1 - h_max < first {
            return Err(EvalError::Horizon {
                horizon: h_max,
                start: first,
                len: t_len,
            });
        }
        Ok(Self {
            first,
            last: t_len - 1 - h_max,
        })
    }
}

/// Rolled-out predictions for every (sequence, start) pair.
pub struct Predictions {
    /// `(sequence, start)` per row.
    pub rows: Vec<(usize, usize)>,
    /// `preds[j]` holds `x̂_{start+j+1}` for every row, flattened `[rows·d_x]`.
    pub preds: Vec<Vec<f64>>,
    pub d_x: usize,
}

/// Filter each sequence and roll the generative model forward from every
/// start offset. Filtering-mode models are filtered once per sequence;
/// smoothing-mode models are re-filtered on each prefix so no future
/// observation leaks into a start state.
pub fn predict_all(
    model: &Svbf,
    store: &ParamStore,
    data: &SeqData,
    starts: Starts,
    h_max: usize,
    temp_factor: f64,
) -> Result<Predictions, EvalError> {
    if starts.first > starts.last {
        return Err(EvalError::NoStarts);
    }
    if starts.last + h_max >= data.t {
        return Err(EvalError::Horizon {
            horizon: h_max,
            start: starts.last,
            len: data.t,
        });
    }
    let (n_z, s_dim) = (model.cfg.n_z, model.s_dim());
    let mut rows = Vec::new();
    let mut z = Vec::new();
    let mut s = Vec::new();
    let all: Vec<usize> = (0..data.n).collect();
    match model.cfg.inference_mode {
        InferenceMode::Filtering => {
            let prefix = data.window(&all, 0, starts.last + 1);
            let states = model.filter(store, &prefix, temp_factor)?;
            for i in 0..data.n {
                for st in &states[starts.first..=starts.last] {
                    rows.push((i, st.t));
                    z.extend_from_slice(&st.z[i * n_z..(i + 1) * n_z]);
                    s.extend_from_slice(&st.s[i * s_dim..(i + 1) * s_dim]);
                }
            }
        }
        InferenceMode::Smoothing => {
            let mut per_start = Vec::new();
            for start in starts.first..=starts.last {
                let prefix = data.window(&all, 0, start + 1);
                let states = model.filter(store, &prefix, temp_factor)?;
                per_start.push(states.last().expect("non-empty").clone());
            }
            for i in 0..data.n {
                for st in &per_start {
                    rows.push((i, st.t));
                    z.extend_from_slice(&st.z[i * n_z..(i + 1) * n_z]);
                    s.extend_from_slice(&st.s[i * s_dim..(i + 1) * s_dim]);
                }
            }
        }
    }
    let d_u = data.d_u;
    let controls: Vec<Vec<f64>> = (0..h_max)
        .map(|j| {
            let mut c = Vec::with_capacity(rows.len() * d_u);
            for &(i, st) in &rows {
                let base = (i * data.t + st + j) * d_u;
                c.extend_from_slice(&data.u[base..base + d_u]);
            }
            c
        })
        .collect();
    let state = FilterState { t: 0, z, s };
    let times: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let preds = model.rollout(store, &state, &times, &controls, h_max, temp_factor, None)?;
    Ok(Predictions {
        rows,
        preds,
        d_x: data.d_x,
    })
}

fn truth(data: &SeqData, i: usize, t: usize) -> &[f64] {
    let base = (i * data.t + t) * data.d_x;
    &data.x[base..base + data.d_x]
}

/// Squared error summed over observation dimensions, averaged over rows.
pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Static-baseline MSE: repeat the observation at the prediction start.
pub fn static_mse(data: &SeqData, starts: Starts, horizons: &[usize]) -> Result<Vec<f64>, EvalError> {
    let h_max = horizons.iter().copied().max().unwrap_or(0);
    if starts.last + h_max >= data.t {
        return Err(EvalError::Horizon {
            horizon: h_max,
            start: starts.last,
            len: data.t,
        });
    }
    let count = (data.n * (starts.last - starts.first + 1)) as f64;
    Ok(horizons
        .iter()
        .map(|&h| {
            let mut acc = 0.0;
            for i in 0..data.n {
                for st in starts.first..=starts.last {
                    acc += squared_error(truth(data, i, st), truth(data, i, st + h));
                }
            }
            acc / count
        })
        .collect())
}

pub fn mse_of(preds: &Predictions, data: &SeqData, horizons: &[usize]) -> Vec<f64> {
    horizons
        .iter()
        .map(|&h| {
            let p = &preds.preds[h - 1];
            let mut acc = 0.0;
            for (r, &(i, st)) in preds.rows.iter().enumerate() {
                acc += squared_error(&p[r * preds.d_x..(r + 1) * preds.d_x], truth(data, i, st + h));
            }
            acc / preds.rows.len() as f64
        })
        .collect()
}

/// Prediction MSE per horizon alongside the Static baseline.
pub fn n_step_mse(
    model: &Svbf,
    store: &ParamStore,
    data: &SeqData,
    horizons: &[usize],
    starts: Option<Starts>,
    temp_factor: f64,
) -> Result<MetricReport, EvalError> {
    let h_max = validate_horizons(horizons)?;
    let starts = match starts {
        Some(s) => s,
        None => Starts::all(model, data.t, h_max)?,
    };
    let preds = predict_all(model, store, data, starts, h_max, temp_factor)?;
    Ok(MetricReport {
        metric: "mse".into(),
        horizons: horizons.to_vec(),
        columns: vec![
            ("model".into(), mse_of(&preds, data, horizons)),
            ("static".into(), static_mse(data, starts, horizons)?),
        ],
        fingerprint: String::new(),
        seed: 0,
    })
}

fn validate_horizons(horizons: &[usize]) -> Result<usize, EvalError> {
    match horizons.iter().copied().max() {
        Some(h) if h > 0 && horizons.iter().all(|&h| h > 0) => Ok(h),
        _ => Err(EvalError::Model(ModelError::Horizon)),
    }
}

/// Coefficient of determination per horizon: `1 − SS_res/SS_tot` per
/// observation dimension over all rows, averaged over dimensions.
pub fn prediction_r2(preds: &Predictions, data: &SeqData, horizons: &[usize]) -> Result<Vec<f64>, EvalError> {
    let d = data.d_x;
    horizons
        .iter()
        .map(|&h| {
            let p = &preds.preds[h - 1];
            let mut total = 0.0;
            for k in 0..d {
                let ys: Vec<f64> = preds.rows.iter().map(|&(i, st)| truth(data, i, st + h)[k]).collect();
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
                if ss_tot <= 0.0 {
                    return Err(EvalError::ZeroVariance(k));
                }
                let ss_res: f64 = ys.iter().enumerate().map(|(r, y)| (y - p[r * d + k]).powi(2)).sum();
                total += 1.0 - ss_res / ss_tot;
            }
            Ok(total / d as f64)
        })
        .collect()
}

/// OLS with intercept fit on the first half of the samples, R² per target
/// dimension on the second half. `z` is `[n, d_z]`, `targets` `[n, d_t]`.
pub fn r2_probe(z: &[f64], d_z: usize, targets: &[f64], d_t: usize) -> Result<Vec<f64>, EvalError> {
    let n = z.len() / d_z.max(1);
    if targets.len() != n * d_t {
        return Err(EvalError::Dim(format!("{} latent rows vs {} target rows", n, targets.len() / d_t.max(1))));
    }
    if n < 4 {
        return Err(EvalError::TooFewSamples(4));
    }
    let half = n / 2;
    let design = |rows: std::ops::Range<usize>| {
        DMatrix::from_fn(rows.len(), d_z + 1, |r, c| if c == 0 { 1.0 } else { z[(rows.start + r) * d_z + c - 1] })
    };
    let x_train = design(0..half);
    let x_test = design(half..n);
    let svd = x_train.svd(true, true);
    (0..d_t)
        .map(|k| {
            let y_train = DVector::from_fn(half, |r, _| targets[r * d_t + k]);
            let y_test = DVector::from_fn(n - half, |r, _| targets[(half + r) * d_t + k]);
            let mean = y_test.mean();
            let ss_tot: f64 = y_test.iter().map(|y| (y - mean).powi(2)).sum();
            if ss_tot <= 1e-300 {
                return Err(EvalError::ZeroVariance(k));
            }
            let beta = svd
                .solve(&y_train, 1e-10)
                .map_err(|e| EvalError::Dim(e.to_string()))?;
            let resid = &y_test - &x_test * beta;
            Ok(1.0 - resid.norm_squared() / ss_tot)
        })
        .collect()
}

/// Axis-aligned threshold tree grown greedily on Gini impurity.
#[derive(Clone, Debug, PartialEq)]
pub enum Tree {
    Leaf(bool),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Tree>,
        right: Box<Tree>,
    },
}

impl Tree {
    pub fn fit(x: &[f64], d: usize, y: &[bool], depth: usize) -> Tree {
        let idx: Vec<usize> = (0..y.len()).collect();
        grow(x, d, y, &idx, depth)
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        match self {
            Tree::Leaf(v) => *v,
            Tree::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

fn grow(x: &[f64], d: usize, y: &[bool], idx: &[usize], depth: usize) -> Tree {
    let pos = idx.iter().filter(|&&i| y[i]).count();
    let majority = 2 * pos > idx.len();
    if depth == 0 || pos == 0 || pos == idx.len() {
        return Tree::Leaf(majority);
    }
    let parent = gini(pos, idx.len()) * idx.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..d {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| x[a * d + f].total_cmp(&x[b * d + f]));
        let mut left_pos = 0;
        for j in 0..order.len() - 1 {
            if y[order[j]] {
                left_pos += 1;
            }
            let (a, b) = (x[order[j] * d + f], x[order[j + 1] * d + f]);
            if a == b {
                continue;
            }
            let nl = j + 1;
            let nr = order.len() - nl;
            let cost = gini(left_pos, nl) * nl as f64 + gini(pos - left_pos, nr) * nr as f64;
            if best.map_or(true, |(c, _, _)| cost < c - 1e-12) {
                best = Some((cost, f, 0.5 * (a + b)));
            }
        }
    }
    match best {
        Some((cost, feature, threshold)) if cost < parent - 1e-12 => {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i * d + feature] <= threshold);
            Tree::Split {
                feature,
                threshold,
                left: Box::new(grow(x, d, y, &l, depth - 1)),
                right: Box::new(grow(x, d, y, &r, depth - 1)),
            }
        }
        _ => Tree::Leaf(majority),
    }
}

pub fn f1_score(pred: &[bool], truth: &[bool]) -> f64 {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// Depth-3 tree on `s` (`[n, d]`) trained on the first half, F1 on the second.
pub fn f1_probe(s: &[f64], d: usize, flags: &[bool]) -> Result<f64, EvalError> {
    let n = flags.len();
    if s.len() != n * d {
        return Err(EvalError::Dim(format!("{} switch rows vs {} flags", s.len() / d.max(1), n)));
    }
    if n < 4 {
        return Err(EvalError::TooFewSamples(4));
    }
    if flags.iter().all(|&f| f) || flags.iter().all(|&f| !f) {
        return Err(EvalError::SingleClass);
    }
    let half = n / 2;
    let tree = Tree::fit(&s[..half * d], d, &flags[..half], 3);
    let pred: Vec<bool> = (half..n).map(|i| tree.predict(&s[i * d..(i + 1) * d])).collect();
    Ok(f1_score(&pred, &flags[half..]))
}

/// Fraction of mispredicted pixels per horizon after thresholding the
/// predicted probabilities at 0.5.
pub fn pixel_error_fraction(
    model: &Svbf,
    store: &ParamStore,
    data: &SeqData,
    horizons: &[usize],
    starts: Option<Starts>,
    temp_factor: f64,
) -> Result<MetricReport, EvalError> {
    if data.x.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(EvalError::NonBinary);
    }
    let h_max = validate_horizons(horizons)?;
    let starts = match starts {
        Some(s) => s,
        None => Starts::all(model, data.t, h_max)?,
    };
    let preds = predict_all(model, store, data, starts, h_max, temp_factor)?;
    let vals = horizons
        .iter()
        .map(|&h| {
            let p = &preds.preds[h - 1];
            let mut wrong = 0usize;
            for (r, &(i, st)) in preds.rows.iter().enumerate() {
                let t = truth(data, i, st + h);
                wrong += pixel_mismatches(&p[r * data.d_x..(r + 1) * data.d_x], t);
            }
            wrong as f64 / (preds.rows.len() * data.d_x) as f64
        })
        .collect();
    Ok(MetricReport {
        metric: "pixels".into(),
        horizons: horizons.to_vec(),
        columns: vec![("model".into(), vals)],
        fingerprint: String::new(),
        seed: 0,
    })
}

pub fn pixel_mismatches(prob: &[f64], truth: &[f64]) -> usize {
    prob.iter().zip(truth).filter(|(p, t)| (**p > 0.5) != (**t > 0.5)).count()
}

/// Noise-free filtered latents at every step `t ≥ 1` of every sequence:
/// `(z [rows·n_z], s [rows·s_dim], (sequence, t) per row)`.
pub fn filtered_latents(
    model: &Svbf,
    store: &ParamStore,
    data: &SeqData,
    temp_factor: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<(usize, usize)>), EvalError> {
    let states = model.filter(store, data, temp_factor)?;
    let (n_z, s_dim) = (model.cfg.n_z, model.s_dim());
    let (mut z, mut s, mut idx) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..data.n {
        for st in &states[1..] {
            z.extend_from_slice(&st.z[i * n_z..(i + 1) * n_z]);
            s.extend_from_slice(&st.s[i * s_dim..(i + 1) * s_dim]);
            idx.push((i, st.t));
        }
    }
    Ok((z, s, idx))
}

/// One trained `(Δt, mode)` cell of the discretization study.
#[derive(Clone, Debug, PartialEq)]
pub struct DtRow {
    pub dt: f64,
    pub mode: SwitchMode,
    pub abs_error: f64,
    pub checksum: String,
}

pub fn dt_rows_csv(rows: &[DtRow]) -> String {
    let mut out = String::from("dt,mode,abs_error,checksum\n");
    for r in rows {
        writeln!(out, "{},{},{:.6e},{}", r.dt, r.mode, r.abs_error, r.checksum).expect("string write");
    }
    out
}

/// Mean absolute 1-step error, averaged over observation dimensions, rows
/// and start offsets.
pub fn one_step_abs_error(
    model: &Svbf,
    store: &ParamStore,
    data: &SeqData,
    temp_factor: f64,
) -> Result<f64, EvalError> {
    let starts = Starts::all(model, data.t, 1)?;
    let preds = predict_all(model, store, data, starts, 1, temp_factor)?;
    let d = data.d_x;
    let mut acc = 0.0;
    for (r, &(i, st)) in preds.rows.iter().enumerate() {
        let t = truth(data, i, st + 1);
        acc += preds.preds[0][r * d..(r + 1) * d]
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(acc / (preds.rows.len() * d) as f64)
}

/// Discretization study setup. The physics step stays fixed; the observation
/// interval `Δt` is a whole number of physics steps.
#[derive(Clone, Debug)]
pub struct DtStudy {
    pub world: BoxWorld,
    pub dts: Vec<f64>,
    pub modes: Vec<SwitchMode>,
    pub model: SvbfConfig,
    pub train: TrainSettings,
    pub n_train: usize,
    pub n_test: usize,
    pub t_len: usize,
    pub seed: u64,
}

pub fn dt_study(study: &DtStudy) -> Result<Vec<DtRow>, EvalError> {
    let mut rows = Vec::new();
    for &dt in &study.dts {
        let substeps = (dt / study.world.dt).round().max(1.0) as usize;
        let world = BoxWorld {
            substeps,
            ..study.world.clone()
        };
        let train = box_generate(&world, study.n_train, study.t_len, study.seed)?;
        let test = box_generate(&world, study.n_test, study.t_len, study.seed ^ 0x7e57)?;
        let checksum = train.checksum();
        let train = train.to_seq_data();
        let test = test.to_seq_data();
        for &mode in &study.modes {
            let cfg = SvbfConfig {
                switch_mode: mode,
                n_x: train.d_x,
                n_u: train.d_u,
                ..study.model.clone()
            };
            let (model, params) = Svbf::new(cfg, study.seed)?;
            let mut trainer = Trainer::new(model, params, study.train.clone());
            trainer.run(&train, study.train.steps, |_| {})?;
            let factor = trainer.model.cfg.anneal_factor(trainer.step_count());
            let err = one_step_abs_error(&trainer.model, &trainer.params, &test, factor)?;
            rows.push(DtRow {
                dt,
                mode,
                abs_error: err,
                checksum: checksum.clone(),
            });
        }
    }
    Ok(rows)
}

/// Recurrent baseline: a GRU over `(x_t, u_t)` with a linear read-out
/// predicting `x_{t+1}`, trained by teacher forcing; multi-step predictions
/// feed back its own outputs.
pub struct GruBaseline {
    cell: GruCell,
    out: Linear,
    pub params: ParamStore,
    pub d_x: usize,
    pub d_u: usize,
}

impl GruBaseline {
    pub fn new(d_x: usize, d_u: usize, hidden: usize, seed: u64) -> Result<Self, EvalError> {
        let mut params = ParamStore::new(seed);
        let cell = GruCell::register(&mut params, "gru", d_x + d_u, hidden)?;
        let out = Linear::register(&mut params, "gru_out", hidden, d_x, (1.0 / hidden as f64).sqrt())?;
        Ok(Self {
            cell,
            out,
            params,
            d_x,
            d_u,
        })
    }

    fn input(&self, g: &mut Graph, x: Vec<f64>, u: Vec<f64>, n: usize) -> Result<crate::diff::Var, EvalError> {
        let xv = g.constant(n, self.d_x, x)?;
        if self.d_u == 0 {
            return Ok(xv);
        }
        let uv = g.constant(n, self.d_u, u)?;
        Ok(g.concat_cols(&[xv, uv])?)
    }

    /// Teacher-forced one-step MSE on `data`, trained with Adam.
    pub fn train(&mut self, data: &SeqData, steps: u64, batch: usize, lr: f64, seed: u64) -> Result<f64, EvalError> {
        let mut opt = OptimState::new(&self.params, lr, 1.0, 1);
        let mut last = f64::NAN;
        for step in 0..steps {
            let mut r = crate::rng::stream(seed, &[0x6e0, step]);
            let rows: Vec<usize> = (0..batch.min(data.n))
                .map(|_| rand::Rng::gen_range(&mut r, 0..data.n))
                .collect();
            let b = data.window(&rows, 0, data.t);
            let mut g = Graph::new();
            let mut h = g.full(b.n, self.cell.hidden, 0.0);
            let mut terms = Vec::new();
            for t in 0..b.t - 1 {
                let inp = self.input(&mut g, b.x_at(t), b.u_at(t), b.n)?;
                h = self.cell.step(&mut g, &self.params, inp, h)?;
                let pred = self.out.forward(&mut g, &self.params, h)?;
                let target = g.constant(b.n, self.d_x, b.x_at(t + 1))?;
                let diff = g.sub(pred, target)?;
                let sq = g.mul(diff, diff)?;
                terms.push(g.mean(sq));
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = g.add(loss, t)?;
            }
            let loss = g.scale(loss, 1.0 / terms.len() as f64);
            last = g.scalar(loss);
            let grads = g.grad(loss, &self.params)?;
            adam_step(&mut self.params, &grads, &mut opt)?;
        }
        Ok(last)
    }

    /// MSE per horizon (summed over dimensions) over the same start offsets as
    /// the model metrics.
    pub fn n_step_mse(&self, data: &SeqData, horizons: &[usize], starts: Starts) -> Result<Vec<f64>, EvalError> {
        let h_max = validate_horizons(horizons)?;
        if starts.last + h_max >= data.t {
            return Err(EvalError::Horizon {
                horizon: h_max,
                start: starts.last,
                len: data.t,
            });
        }
        let mut acc = vec![0.0; horizons.len()];
        let mut count = 0usize;
        for start in starts.first..=starts.last {
            let mut g = Graph::new();
            let n = data.n;
            let mut h = g.full(n, self.cell.hidden, 0.0);
            let mut pred = Vec::new();
            for t in 0..=start {
                let inp = self.input(&mut g, data.x_at(t), data.u_at(t), n)?;
                h = self.cell.step(&mut g, &self.params, inp, h)?;
            }
            let mut preds = Vec::with_capacity(h_max);
            for j in 0..h_max {
                let p = self.out.forward(&mut g, &self.params, h)?;
                pred = g.value(p).to_vec();
                preds.push(pred.clone());
                if j + 1 < h_max {
                    let inp = self.input(&mut g, pred.clone(), data.u_at(start + j + 1), n)?;
                    h = self.cell.step(&mut g, &self.params, inp, h)?;
                }
            }
            let _ = pred;
            for (k, &hz) in horizons.iter().enumerate() {
                for i in 0..n {
                    acc[k] += squared_error(&preds[hz - 1][i * self.d_x..(i + 1) * self.d_x], truth(data, i, start + hz));
                }
            }
            count += n;
        }
        Ok(acc.into_iter().map(|a| a / count as f64).collect())
    }
}
