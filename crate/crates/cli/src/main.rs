use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use svbf::checkpoint::{Checkpoint, CheckpointError};
use svbf::config::{ConfigError, EnvKind, RunConfig};
use svbf::diff::ParamStore;
use svbf::envs::{EnvError, TrajectoryBatch, IMAGE_SIDE};
use svbf::eval::{self, EvalError};
use svbf::experiment::{self, ExperimentError, Split};
use svbf::model::{DecoderKind, ModelError, Svbf};
use svbf::train::{LogRow, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "svbf", about = "Switching linear dynamics with variational inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dataset from a config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Train a model; writes a checkpoint directory and `<out>.log.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metric CSV.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Needed for `dtstudy`, which trains its own models.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-step predictions as CSV (and PGM frames for images).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for predicted and true frames of the first sequence.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Mse,
    /// Linear probe from latents to true velocities.
    R2,
    /// Prediction R² against the observations.
    R2pred,
    F1,
    Pixels,
    Dtstudy,
}

struct Fail {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: 2, msg: msg.into() }
}

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Fail {
    Fail {
        code: 3,
        msg: format!("{}: {e}", path.display()),
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        usage(format!("config: {e}"))
    }
}

fn numeric(e: &TrainError) -> bool {
    matches!(e, TrainError::Numeric { .. })
        || matches!(e, TrainError::Model(ModelError::NonFinite { .. }))
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        let code = if numeric(&e) { 4 } else { 2 };
        Fail { code, msg: e.to_string() }
    }
}

impl From<ModelError> for Fail {
    fn from(e: ModelError) -> Self {
        let code = if matches!(e, ModelError::NonFinite { .. }) { 4 } else { 2 };
        Fail { code, msg: e.to_string() }
    }
}

impl From<EnvError> for Fail {
    fn from(e: EnvError) -> Self {
        let code = match e {
            EnvError::Io(_) | EnvError::BadMagic | EnvError::BadVersion(_) | EnvError::Truncated | EnvError::Malformed(_) => 3,
            EnvError::NonFinite { .. } => 4,
            _ => 2,
        };
        Fail { code, msg: e.to_string() }
    }
}

impl From<EvalError> for Fail {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Env(v) => v.into(),
            other => usage(other.to_string()),
        }
    }
}

impl From<ExperimentError> for Fail {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Env(v) => v.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Eval(v) => v.into(),
            ExperimentError::Usage(m) => usage(m),
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Fail> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn read_data(path: &Path) -> Result<TrajectoryBatch, Fail> {
    TrajectoryBatch::read(path).map_err(|e| match e {
        EnvError::Io(m) => io_fail(path, m),
        other => io_fail(path, other),
    })
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), Fail> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_fail(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// A checkpoint with its config rebuilt and verified.
struct Loaded {
    cfg: RunConfig,
    trainer: Trainer,
}

fn load_checkpoint(dir: &Path) -> Result<Loaded, Fail> {
    let ck = Checkpoint::load(dir).map_err(|e| match e {
        CheckpointError::Io(io) => io_fail(dir, io),
        other => io_fail(dir, other),
    })?;
    let cfg = RunConfig::parse(&ck.config_text)?;
    if cfg.fingerprint() != ck.fingerprint {
        return Err(io_fail(dir, "config fingerprint does not match the stored config"));
    }
    let (model, fresh) = experiment::init_model(&cfg)?;
    ck.check_against(&fresh).map_err(|e| usage(e.to_string()))?;
    let mut trainer = Trainer::new(model, ck.params, cfg.train_settings());
    trainer.optim = ck.optim;
    Ok(Loaded { cfg, trainer })
}

fn save_checkpoint(cfg: &RunConfig, params: &ParamStore, tr: &Trainer, dir: &Path) -> Result<(), Fail> {
    Checkpoint::new(cfg.to_text(), cfg.fingerprint(), params.clone(), tr.optim.clone())
        .save(dir)
        .map_err(|e| io_fail(dir, e))
}

fn threads() -> Result<usize, Fail> {
    match std::env::var("SVBF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("SVBF_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(1),
    }
}

fn cmd_generate(config: &Path, seed: Option<u64>, out: &Path, split: SplitArg) -> Result<(), Fail> {
    let cfg = load_config(config, seed)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = experiment::generate(&cfg, split)?;
    data.write(out).map_err(|e| io_fail(out, e))?;
    println!("N={} T={} d_x={} d_u={} checksum={}", data.n, data.t, data.d_x, data.d_u, data.checksum());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<(), Fail> {
    let cfg = load_config(config, seed)?;
    let batch = read_data(data)?;
    experiment::check_dims(&cfg, &batch)?;
    let seq = batch.to_seq_data();
    let mut tr = match resume {
        Some(dir) => {
            let loaded = load_checkpoint(dir)?;
            if loaded.cfg.fingerprint() != cfg.fingerprint() {
                return Err(usage("checkpoint was written with a different config"));
            }
            loaded.trainer
        }
        None => experiment::trainer(&cfg)?,
    };

    let mut log_path = out.as_os_str().to_os_string();
    log_path.push(".log.csv");
    let log_path = PathBuf::from(log_path);
    let mut log = String::new();
    if resume.is_some() {
        log = fs::read_to_string(&log_path).unwrap_or_default();
    }
    if log.is_empty() {
        writeln!(log, "{}", LogRow::HEADER).expect("string write");
    }
    fs::write(&log_path, &log).map_err(|e| io_fail(&log_path, e))?;

    save_checkpoint(&cfg, &tr.params, &tr, out)?;
    let every = cfg.train.log_every.max(1);
    while tr.step_count() < cfg.train.steps {
        let until = ((tr.step_count() / every + 1) * every).min(cfg.train.steps);
        let mut rows = String::new();
        let result = tr.run(&seq, until, |r| {
            writeln!(rows, "{}", r.csv()).expect("string write");
        });
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| io_fail(&log_path, e))?;
        f.write_all(rows.as_bytes()).map_err(|e| io_fail(&log_path, e))?;
        print!("{rows}");
        match result {
            Ok(()) => save_checkpoint(&cfg, &tr.params, &tr, out)?,
            Err(e) => {
                // The step that failed left parameters untouched, but the
                // checkpoint on disk is the last fully logged one.
                return Err(e.into());
            }
        }
    }
    println!("# trained to step {} -> {}", tr.step_count(), out.display());
    Ok(())
}

fn temp_factor(tr: &Trainer) -> f64 {
    tr.model.cfg.anneal_factor(tr.step_count())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    data: Option<&Path>,
    metric: Metric,
    horizons: Option<Vec<usize>>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), Fail> {
    if metric == Metric::Dtstudy {
        let config = config.ok_or_else(|| usage("dtstudy needs --config"))?;
        let cfg = load_config(config, seed)?;
        if cfg.env != EnvKind::Box {
            return Err(usage("dtstudy runs on the box environment"));
        }
        let rows = eval::dt_study(&experiment::dt_study_setup(&cfg)?)?;
        return write_out(out, &eval::dt_rows_csv(&rows));
    }
    let checkpoint = checkpoint.ok_or_else(|| usage("--checkpoint is required"))?;
    let data = data.ok_or_else(|| usage("--data is required"))?;
    let Loaded { cfg, trainer } = load_checkpoint(checkpoint)?;
    let batch = read_data(data)?;
    experiment::check_dims(&cfg, &batch)?;
    let seq = batch.to_seq_data();
    let horizons = horizons.unwrap_or_else(|| cfg.horizons.clone());
    let f = temp_factor(&trainer);
    let (m, p) = (&trainer.model, &trainer.params);
    let report = match metric {
        Metric::Mse => experiment::mse_report(&cfg, m, p, &seq, &horizons, f)?,
        Metric::R2pred => experiment::r2_report(&cfg, m, p, &seq, &horizons, f)?,
        Metric::F1 => experiment::f1_report(&cfg, m, p, &batch, f)?,
        Metric::R2 => velocity_probe(&cfg, m, p, &batch, f)?,
        Metric::Pixels => {
            if cfg.model.decoder != DecoderKind::Bernoulli {
                return Err(usage("pixels needs a bernoulli decoder"));
            }
            let h_max = horizons.iter().copied().max().unwrap_or(0);
            let starts = experiment::starts_for(&cfg, m, seq.t, h_max)?;
            let mut r = eval::pixel_error_fraction(m, p, &seq, &horizons, Some(starts), f)?;
            r.fingerprint = cfg.fingerprint();
            r.seed = cfg.seed;
            r
        }
        Metric::Dtstudy => unreachable!("handled above"),
    };
    write_out(out, &report.to_csv())
}

fn velocity_probe(
    cfg: &RunConfig,
    model: &Svbf,
    params: &ParamStore,
    batch: &TrajectoryBatch,
    f: f64,
) -> Result<eval::MetricReport, Fail> {
    let vel = batch.aux("velocity")?;
    let seq = batch.to_seq_data();
    let (z, _, idx) = eval::filtered_latents(model, params, &seq, f)?;
    let mut targets = Vec::with_capacity(idx.len() * vel.width);
    for &(i, t) in &idx {
        let base = (i * seq.t + t) * vel.width;
        targets.extend(vel.data[base..base + vel.width].iter().map(|&v| v as f64));
    }
    let r2 = eval::r2_probe(&z, model.cfg.n_z, &targets, vel.width)?;
    Ok(eval::MetricReport {
        metric: "r2".into(),
        horizons: vec![0; r2.len()],
        columns: vec![("model".into(), r2)],
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
    })
}

fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    horizons: Option<Vec<usize>>,
    out: Option<&Path>,
    frames: Option<&Path>,
) -> Result<(), Fail> {
    let Loaded { cfg, trainer } = load_checkpoint(checkpoint)?;
    let batch = read_data(data)?;
    experiment::check_dims(&cfg, &batch)?;
    let seq = batch.to_seq_data();
    let horizons = horizons.unwrap_or_else(|| cfg.horizons.clone());
    let h_max = horizons.iter().copied().max().filter(|&h| h > 0).ok_or_else(|| usage("horizons must be positive"))?;
    let starts = experiment::starts_for(&cfg, &trainer.model, seq.t, h_max)?;
    let preds = eval::predict_all(&trainer.model, &trainer.params, &seq, starts, h_max, temp_factor(&trainer))?;
    let d = seq.d_x;
    let mut text = String::from("seq,start,horizon");
    for j in 0..d {
        write!(text, ",x{j}").expect("string write");
    }
    text.push('\n');
    for (r, &(i, st)) in preds.rows.iter().enumerate() {
        for &h in &horizons {
            write!(text, "{i},{st},{h}").expect("string write");
            for v in &preds.preds[h - 1][r * d..(r + 1) * d] {
                write!(text, ",{v:.6e}").expect("string write");
            }
            text.push('\n');
        }
    }
    write_out(out, &text)?;
    if let Some(dir) = frames {
        if d != IMAGE_SIDE * IMAGE_SIDE {
            return Err(usage("frames are only available for image observations"));
        }
        fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
        let st = preds.rows[0].1;
        for &h in &horizons {
            let p = &preds.preds[h - 1][..d];
            let t = &seq.x[(st + h) * d..(st + h + 1) * d];
            write_pgm(&dir.join(format!("pred_h{h:02}.pgm")), p)?;
            write_pgm(&dir.join(format!("true_h{h:02}.pgm")), t)?;
        }
    }
    Ok(())
}

fn write_pgm(path: &Path, img: &[f64]) -> Result<(), Fail> {
    let mut bytes = format!("P5\n{IMAGE_SIDE} {IMAGE_SIDE}\n255\n").into_bytes();
    bytes.extend(img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

fn run(cli: Cli) -> Result<(), Fail> {
    threads()?;
    match cli.cmd {
        Cmd::Generate { config, seed, out, split } => cmd_generate(&config, seed, &out, split),
        Cmd::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => cmd_train(&config, &data, &out, seed, resume.as_deref()),
        Cmd::Eval {
            checkpoint,
            config,
            data,
            metric,
            horizons,
            seed,
            out,
        } => cmd_eval(
            checkpoint.as_deref(),
            config.as_deref(),
            data.as_deref(),
            metric,
            horizons,
            seed,
            out.as_deref(),
        ),
        Cmd::Predict {
            checkpoint,
            data,
            horizons,
            out,
            frames,
        } => cmd_predict(&checkpoint, &data, horizons, out.as_deref(), frames.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
