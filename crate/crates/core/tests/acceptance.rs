//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! With `SVBF_ACCEPTANCE_STRICT=1` any failure also makes the exit status
//! non-zero; otherwise the verdicts are only printed, so a known failure does
//! not stop the rest of `cargo test`.
//!
//! `cargo test --release --test acceptance -- 3 4` runs a subset. Criterion 9
//! only runs with `SVBF_EXTENDED=1`.

mod common;

use std::collections::BTreeSet;
use std::f64::consts::E;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use svbf::config::{EnvKind, RunConfig};
use svbf::diff::{Graph, ParamStore};
use svbf::distributions::*;
use svbf::dynamics::SwitchMode;
use svbf::eval::{self, DtRow};
use svbf::experiment::{self, Split};
use svbf::model::{Noise, SeqData, Svbf, SvbfConfig, UnrollOptions};
use svbf::train::{TrainSettings, Trainer};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Below a report-only target.
    Report(String),
    Skip(String),
}

type Res = Result<Outcome, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// ---------------------------------------------------------------- 1

fn numerical_core() -> Res {
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut note = |err: f64, what: String| {
        if err > worst {
            worst = err;
            worst_at = what;
        }
    };
    for (name, inputs, build) in op_cases() {
        for seed in 0..10 {
            note(check_op(seed, &inputs, &build), format!("{name} seed {seed}"));
        }
    }
    for seed in 0..10 {
        note(check_mlp(seed), format!("mlp seed {seed}"));
    }
    for mode in [SwitchMode::ConcreteSoftmax, SwitchMode::GaussianHierarchical, SwitchMode::RelaxedBernoulli] {
        for seed in 0..10 {
            note(check_model_unroll(tiny_model_config(mode), seed, 10), format!("elbo {mode} seed {seed}"));
        }
    }
    let n_ops = op_cases().len();
    Ok(verdict(
        worst < FD_TOL,
        format!("{n_ops} ops + MLP + ELBO x 10 seeds, worst rel err {worst:.2e} ({worst_at})"),
    ))
}

// ---------------------------------------------------------------- 2

fn row(g: &mut Graph, v: &[f64]) -> svbf::diff::Var {
    g.constant(1, v.len(), v.to_vec()).unwrap()
}

fn closed_form_oracles() -> Res {
    let mut fails = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            fails.push(what.to_string());
        }
    };
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;

    let mut g = Graph::new();
    let gauss = |g: &mut Graph, m: f64, v: f64| {
        let (mv, vv) = (row(g, &[m]), row(g, &[v]));
        GaussianParams::new(g, mv, vv).unwrap()
    };

    let (a, b) = (gauss(&mut g, 0.0, 1.0), gauss(&mut g, 2.0, 1.0));
    let f = fuse_gaussians(&mut g, &a, &b).map_err(|e| e.to_string())?;
    check(g.value(f.mean)[0] == 1.0 && g.value(f.var)[0] == 0.5, "fuse symmetric");
    let (a, b) = (gauss(&mut g, 1.0, 2.0), gauss(&mut g, 4.0, 1.0));
    let f = fuse_gaussians(&mut g, &a, &b).map_err(|e| e.to_string())?;
    check(
        close(g.value(f.mean)[0], 3.0, 1e-12) && close(g.value(f.var)[0], 2.0 / 3.0, 1e-12),
        "fuse (1,2)x(4,1)",
    );
    let (a, b) = (gauss(&mut g, 0.7, 0.3), gauss(&mut g, -5.0, 1e12));
    let f = fuse_gaussians(&mut g, &a, &b).map_err(|e| e.to_string())?;
    check(
        close(g.value(f.mean)[0], 0.7, 1e-6) && close(g.value(f.var)[0], 0.3, 1e-6),
        "fuse uninformative",
    );

    let (q, p) = (gauss(&mut g, 0.4, 1.7), gauss(&mut g, 0.4, 1.7));
    let kl = kl_gaussian(&mut g, &q, &p).map_err(|e| e.to_string())?;
    check(g.value(kl)[0] == 0.0, "kl q=p");
    let (q, p) = (gauss(&mut g, 0.0, 1.0), gauss(&mut g, 1.0, 1.0));
    let kl = kl_gaussian(&mut g, &q, &p).map_err(|e| e.to_string())?;
    check(close(g.value(kl)[0], 0.5, 1e-12), "kl mean shift");
    let (q, p) = (gauss(&mut g, 0.0, 4.0), gauss(&mut g, 0.0, 1.0));
    let kl = kl_gaussian(&mut g, &q, &p).map_err(|e| e.to_string())?;
    check(close(g.value(kl)[0], 0.5 * (3.0 - 4f64.ln()), 1e-12), "kl variance ratio");

    let concrete = |g: &mut Graph, logits: &[f64], gum: &[f64], lambda: f64| {
        let (l, n) = (row(g, logits), row(g, gum));
        let s = sample_concrete(g, &ConcreteParams::new(l, lambda).unwrap(), n).unwrap();
        g.value(s).to_vec()
    };
    let s = concrete(&mut g, &[0.0, 0.0], &[0.37, 0.37], 0.6);
    check(s == [0.5, 0.5], "concrete symmetric");
    let s = concrete(&mut g, &[0.0, 1.0], &[0.0, 0.0], 1.0);
    check(
        close(s[0], 1.0 / (1.0 + E), 1e-12) && close(s[1], E / (1.0 + E), 1e-12),
        "concrete (1,e) at λ=1",
    );
    let s = concrete(&mut g, &[0.0, 1.0], &[0.0, 0.0], 0.01);
    check(close(s[0], 0.0, 1e-6) && close(s[1], 1.0, 1e-6), "concrete near one-hot");

    let x = row(&mut g, &[0.5, 0.5]);
    let l = row(&mut g, &[0.0, 0.0]);
    let d = concrete_log_density(&mut g, x, &ConcreteParams::new(l, 1.0).unwrap()).map_err(|e| e.to_string())?;
    check(close(g.value(d)[0], 0.0, 1e-12), "density at centre");

    let mut masses = Vec::new();
    for &lambda in &[0.5, 1.0, 2.0] {
        let raw = |x1: f64| {
            let mut g = Graph::new();
            let x = row(&mut g, &[x1, 1.0 - x1]);
            let l = row(&mut g, &[0.0, 0.0]);
            let v = g.concrete_log_density(x, l, lambda).unwrap();
            g.scalar(v).exp()
        };
        let m = integrate_unit(raw, 4000);
        masses.push(m);
        check((m - 1.0).abs() < 1e-3, "density mass");
    }
    let detail = format!(
        "fusion, Gaussian KL, Concrete sampling/density; mass at λ=.5/1/2: {:.6}/{:.6}/{:.6}",
        masses[0], masses[1], masses[2]
    );
    Ok(if fails.is_empty() {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(format!("{detail}; failed: {}", fails.join(", ")))
    })
}

// ---------------------------------------------------------------- 3

fn lgssm_model_config() -> SvbfConfig {
    SvbfConfig {
        n_x: 2,
        n_u: 1,
        n_z: 2,
        n_s: 1,
        switch_mode: SwitchMode::ConcreteSoftmax,
        k_init: 1,
        anneal_init: 1.0,
        enc_hidden: 32,
        init_hidden: 32,
        dec_hidden: 0,
        trans_hidden: 0,
        mc_kl_samples: 1,
        ..SvbfConfig::default()
    }
}

/// Per-sequence ELBO on `data`, one posterior sample each.
fn elbo_per_seq(model: &Svbf, params: &ParamStore, data: &SeqData, seed: u64) -> Vec<f64> {
    let seeds: Vec<u64> = (0..data.n as u64).map(|i| svbf::rng::derive(seed, &[i])).collect();
    let mut g = Graph::new();
    let out = model
        .unroll(&mut g, params, data, &mut Noise::from_seeds(&seeds), 1.0, UnrollOptions::default())
        .unwrap();
    out.per_seq.iter().map(|v| -v).collect()
}

fn elbo_validity() -> Res {
    let sys = Lgssm::random(11);
    let train = sys.sample(2000, 20, 1);
    let held = sys.sample(256, 20, 2);
    let ll = sys.log_likelihood(&held);
    let (model, params) = Svbf::new(lgssm_model_config(), 3).map_err(|e| e.to_string())?;
    let settings = TrainSettings {
        steps: 5000,
        batch_size: 32,
        base_lr: 3e-3,
        lr_decay_rate: 0.9,
        lr_decay_every: 1000,
        seed: 4,
        ..TrainSettings::default()
    };
    let mut tr = Trainer::new(model, params, settings);
    let mut gaps = Vec::new();
    let mut last = (0.0, 0.0);
    for (k, &at) in [1000u64, 3000, 5000].iter().enumerate() {
        tr.run(&train, at, |_| {}).map_err(|e| e.to_string())?;
        let elbo = elbo_per_seq(&tr.model, &tr.params, &held, 100 + k as u64);
        let diff: Vec<f64> = elbo.iter().zip(&ll).map(|(e, l)| e - l).collect();
        let (m, se) = mean_and_se(&diff);
        gaps.push(-m);
        last = (m, se);
    }
    let violations = gaps.windows(2).filter(|w| w[1] > w[0]).count();
    let (m, se) = last;
    let mean_ll = ll.iter().sum::<f64>() / ll.len() as f64;
    Ok(verdict(
        m <= 3.0 * se && violations <= 1,
        format!(
            "mean LL {mean_ll:.3}; ELBO − LL = {m:.4} (SE {se:.4}) at 5k; gaps at 1k/3k/5k {:.4}/{:.4}/{:.4}",
            gaps[0], gaps[1], gaps[2]
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn kl_factorization() -> Res {
    let cfg = SvbfConfig {
        n_x: 1,
        n_u: 1,
        n_z: 1,
        n_s: 3,
        k_init: 1,
        mc_kl_samples: 1,
        enc_hidden: 6,
        dec_hidden: 6,
        trans_hidden: 6,
        init_hidden: 6,
        ..SvbfConfig::default()
    };
    let (model, mut params) = Svbf::new(cfg, 21).map_err(|e| e.to_string())?;
    // Move off the symmetric initialization so every KL term is sizeable.
    let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rand::Rng::sample::<f64, _>(&mut r, rand_distr::StandardNormal);
        }
    }
    let n = 10_000;
    let one = SeqData::new(1, 3, 1, 1, vec![0.4, -0.8, 1.1], vec![0.5, -0.2, 0.3]).unwrap();
    let data = one.window(&vec![0; n], 0, 3);
    let seeds: Vec<u64> = (0..n as u64).map(|i| svbf::rng::derive(77, &[i])).collect();
    let mut g = Graph::new();
    let opts = UnrollOptions {
        joint_log_ratio: true,
        traces: false,
    };
    let out = model
        .unroll(&mut g, &params, &data, &mut Noise::from_seeds(&seeds), 1.0, opts)
        .map_err(|e| e.to_string())?;
    let joint = out.log_ratio.ok_or("joint log ratio missing")?;
    let diff: Vec<f64> = out.per_seq_kl.iter().zip(&joint).map(|(a, b)| a - b).collect();
    let (m, se) = mean_and_se(&diff);
    let (kl, _) = mean_and_se(&out.per_seq_kl);
    let (jm, _) = mean_and_se(&joint);
    Ok(verdict(
        m.abs() <= 3.0 * se,
        format!("summed KL {kl:.4} vs joint MC {jm:.4}; difference {m:.4} (SE {se:.4}, {n} samples)"),
    ))
}

// ---------------------------------------------------------------- 5, 6, 7

fn factor(tr: &Trainer) -> f64 {
    tr.model.cfg.anneal_factor(tr.step_count())
}

struct FhnRun {
    csv: String,
    r2: Vec<f64>,
}

fn fhn_run() -> Result<FhnRun, String> {
    let cfg = RunConfig::preset(EnvKind::Fhn);
    let data = experiment::generate(&cfg, Split::Train).map_err(|e| e.to_string())?.to_seq_data();
    let tr = experiment::train(&cfg, &data, |_| {}).map_err(|e| e.to_string())?;
    let report = experiment::r2_report(&cfg, &tr.model, &tr.params, &data, &[5, 10, 30], factor(&tr))
        .map_err(|e| e.to_string())?;
    Ok(FhnRun {
        csv: report.to_csv(),
        r2: report.column("model").ok_or("no model column")?.to_vec(),
    })
}

fn fhn_verdict(run: &FhnRun) -> Outcome {
    let r = &run.r2;
    verdict(
        r[0] >= 0.95 && r[1] >= 0.9 && r[2] >= 0.7,
        format!("held-out R² h5/h10/h30 = {:.4}/{:.4}/{:.4} (floors 0.95/0.9/0.7)", r[0], r[1], r[2]),
    )
}

struct BoxRun {
    csv: String,
    mse: Vec<f64>,
    stat: Vec<f64>,
    f1: Result<f64, String>,
}

fn box_run(with_f1: bool) -> Result<BoxRun, String> {
    let cfg = RunConfig::preset(EnvKind::Box);
    let train = experiment::generate(&cfg, Split::Train).map_err(|e| e.to_string())?.to_seq_data();
    let test = experiment::generate(&cfg, Split::Test).map_err(|e| e.to_string())?;
    let tr = experiment::train(&cfg, &train, |_| {}).map_err(|e| e.to_string())?;
    let f = factor(&tr);
    let report = experiment::mse_report(&cfg, &tr.model, &tr.params, &test.to_seq_data(), &[1, 5, 10], f)
        .map_err(|e| e.to_string())?;
    let f1 = if with_f1 {
        experiment::f1_report(&cfg, &tr.model, &tr.params, &test, f)
            .map_err(|e| e.to_string())
            .map(|r| r.column("model").expect("model column")[0])
    } else {
        Err("not run".into())
    };
    Ok(BoxRun {
        csv: report.to_csv(),
        mse: report.column("model").ok_or("no model column")?.to_vec(),
        stat: report.column("static").ok_or("no static column")?.to_vec(),
        f1,
    })
}

fn box_verdict(run: &BoxRun) -> Outcome {
    let ratio = run.mse[2] / run.stat[2];
    verdict(
        ratio <= 0.2,
        format!(
            "MSE h1/h5/h10 model {:.2e}/{:.2e}/{:.2e}, static {:.2e}/{:.2e}/{:.2e}; h10 ratio {ratio:.4} (≤ 0.2)",
            run.mse[0], run.mse[1], run.mse[2], run.stat[0], run.stat[1], run.stat[2]
        ),
    )
}

fn f1_verdict(run: &BoxRun) -> Res {
    match &run.f1 {
        Ok(f1) if *f1 >= 0.3 => Ok(Outcome::Pass(format!("F1 {f1:.3} (≥ 0.3)"))),
        Ok(f1) => Ok(Outcome::Report(format!("F1 {f1:.3} below 0.3 (report-only)"))),
        Err(e) => Err(format!("probe failed: {e}")),
    }
}

// ---------------------------------------------------------------- 8

fn dt_sweep() -> Res {
    let cfg = RunConfig::preset(EnvKind::Box);
    let study = experiment::dt_study_setup(&cfg).map_err(|e| e.to_string())?;
    let rows = eval::dt_study(&study).map_err(|e| e.to_string())?;
    let mut monotone = true;
    let mut parts = Vec::new();
    for mode in &study.modes {
        let errs: Vec<&DtRow> = rows.iter().filter(|r| r.mode == *mode).collect();
        monotone &= errs.windows(2).all(|w| w[1].abs_error >= w[0].abs_error);
        parts.push(format!(
            "{mode}: {}",
            errs.iter().map(|r| format!("{:.2e}", r.abs_error)).collect::<Vec<_>>().join("/")
        ));
    }
    let shared = rows.chunks(study.modes.len()).all(|c| c.iter().all(|r| r.checksum == c[0].checksum));
    let mut winners = Vec::new();
    for c in rows.chunks(study.modes.len()) {
        let best = c.iter().min_by(|a, b| a.abs_error.total_cmp(&b.abs_error)).expect("non-empty");
        winners.push(format!("Δt={}: {}", c[0].dt, best.mode));
    }
    println!("      crossover report: lower error by Δt -> {}", winners.join(", "));
    Ok(verdict(
        monotone && shared,
        format!("1-step abs error over Δt {:?}: {}", study.dts, parts.join("; ")),
    ))
}

// ---------------------------------------------------------------- 9

fn image_extended() -> Res {
    if std::env::var("SVBF_EXTENDED").ok().as_deref() != Some("1") {
        return Ok(Outcome::Skip("set SVBF_EXTENDED=1 to run".into()));
    }
    let cfg = RunConfig::preset(EnvKind::Image);
    let train = experiment::generate(&cfg, Split::Train).map_err(|e| e.to_string())?.to_seq_data();
    let test = experiment::generate(&cfg, Split::Test).map_err(|e| e.to_string())?.to_seq_data();
    let tr = experiment::train(&cfg, &train, |_| {}).map_err(|e| e.to_string())?;
    let starts = experiment::starts_for(&cfg, &tr.model, test.t, 10).map_err(|e| e.to_string())?;
    let r = eval::pixel_error_fraction(&tr.model, &tr.params, &test, &[10], Some(starts), factor(&tr))
        .map_err(|e| e.to_string())?;
    let v = r.columns[0].1[0];
    Ok(verdict(v <= 0.03, format!("pixel error fraction at h10 {v:.4} (≤ 0.03)")))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut failed = Vec::new();
    let mut emit = |k: u32, title: &str, start: Instant, res: Res| {
        let secs = start.elapsed().as_secs_f64();
        let (tag, text) = match res {
            Ok(Outcome::Pass(d)) => ("PASS", d),
            Ok(Outcome::Fail(d)) => {
                failed.push(k);
                ("FAIL", d)
            }
            Ok(Outcome::Report(d)) => ("REPORT", d),
            Ok(Outcome::Skip(d)) => ("SKIP", d),
            Err(e) => {
                failed.push(k);
                ("FAIL", format!("error: {e}"))
            }
        };
        println!("{tag:<6} [{k:>2}] {title}: {text} ({secs:.1} s)");
    };

    if run(1) {
        let t = Instant::now();
        emit(1, "numerical core", t, numerical_core());
    }
    if run(2) {
        let t = Instant::now();
        emit(2, "closed-form oracles", t, closed_form_oracles());
    }
    if run(3) {
        let t = Instant::now();
        emit(3, "ELBO below Kalman log-likelihood", t, elbo_validity());
    }
    if run(4) {
        let t = Instant::now();
        emit(4, "KL factorization", t, kl_factorization());
    }
    let mut fhn = None;
    if run(5) || run(10) {
        let t = Instant::now();
        let r = fhn_run();
        if run(5) {
            emit(5, "FHN prediction", t, r.as_ref().map(fhn_verdict).map_err(Clone::clone));
        }
        fhn = Some((r, t.elapsed()));
    }
    let mut boxed = None;
    if run(6) || run(7) || run(10) {
        let t = Instant::now();
        let r = box_run(run(7));
        if run(6) {
            emit(6, "box vs static", t, r.as_ref().map(box_verdict).map_err(Clone::clone));
        }
        if run(7) {
            emit(7, "switch semantics", t, r.as_ref().map_err(Clone::clone).and_then(f1_verdict));
        }
        boxed = Some(r);
    }
    if run(8) {
        let t = Instant::now();
        emit(8, "Δt study", t, dt_sweep());
    }
    if run(9) {
        let t = Instant::now();
        emit(9, "image box (extended)", t, image_extended());
    }
    if run(10) {
        let t = Instant::now();
        let res = (|| -> Res {
            let (first_fhn, _) = fhn.take().expect("ran above");
            let first_box = boxed.take().expect("ran above");
            let (a, b) = (first_fhn?, first_box?);
            let again_fhn = fhn_run()?;
            let again_box = box_run(false)?;
            let same_fhn = a.csv == again_fhn.csv;
            let same_box = b.csv == again_box.csv;
            Ok(verdict(
                same_fhn && same_box,
                format!("FHN CSV identical: {same_fhn}; box CSV identical: {same_box}"),
            ))
        })();
        emit(10, "reproducibility", t, res);
    }
    if failed.is_empty() {
        println!("acceptance: no failures");
        return ExitCode::SUCCESS;
    }
    println!("acceptance: failed criteria {failed:?}");
    if std::env::var("SVBF_ACCEPTANCE_STRICT").ok().as_deref() == Some("1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
