//! Independent oracles shared by the integration tests and the acceptance
//! harness: finite differences, a Kalman filter, and 1-D quadrature.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use svbf::diff::{Graph, ParamStore, Tensor, Var};
use svbf::dynamics::SwitchMode;
use svbf::model::{Noise, SeqData, Svbf, SvbfConfig, UnrollOptions};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a small floor so exactly-zero gradients compare
/// by absolute difference.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Clone, Copy)]
pub enum Domain {
    Normal,
    /// exp(N(0, 0.5²)), for log/div inputs.
    Positive,
    /// Uniform on [0.05, 0.95], for gates.
    Unit,
    /// Rows on the simplex interior.
    Simplex,
    /// Normal values pushed at least 0.1 away from zero, for relu.
    AwayFromZero,
}

pub struct Input {
    pub rows: usize,
    pub cols: usize,
    pub domain: Domain,
}

pub fn inp(rows: usize, cols: usize, domain: Domain) -> Input {
    Input { rows, cols, domain }
}

fn draw(r: &mut ChaCha8Rng, i: &Input) -> Vec<f64> {
    let n = i.rows * i.cols;
    let normal = |r: &mut ChaCha8Rng| r.sample::<f64, _>(StandardNormal);
    match i.domain {
        Domain::Normal => (0..n).map(|_| normal(r)).collect(),
        Domain::Positive => (0..n).map(|_| (0.5 * normal(r)).exp()).collect(),
        Domain::Unit => (0..n).map(|_| r.gen_range(0.05..0.95)).collect(),
        Domain::AwayFromZero => (0..n)
            .map(|_| {
                let v: f64 = normal(r);
                v.signum() * (v.abs() + 0.1)
            })
            .collect(),
        Domain::Simplex => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..i.rows {
                let e: Vec<f64> = (0..i.cols).map(|_| (0.5 * normal(r)).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.iter().map(|v| v / s));
            }
            out
        }
    }
}

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// Largest relative error between reverse-mode and central-difference
/// gradients of `sum(w ⊙ f(inputs))` over every input element.
pub fn check_op(seed: u64, inputs: &[Input], build: &Builder) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Vec<f64>> = inputs.iter().map(|i| draw(&mut r, i)).collect();
    let eval = |vals: &[Vec<f64>], weights: Option<&[f64]>| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|(i, v)| g.constant(i.rows, i.cols, v.clone()).unwrap())
            .collect();
        let out = build(&mut g, &vars);
        let (or, oc) = g.shape(out);
        let w: Vec<f64> = match weights {
            Some(w) => w.to_vec(),
            None => {
                let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                (0..or * oc).map(|_| wr.sample(StandardNormal)).collect()
            }
        };
        let wv = g.constant(or, oc, w.clone()).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        let grads = vars.iter().map(|&v| g.grad_wrt(loss, v).unwrap()).collect();
        (g.scalar(loss), grads, w)
    };
    let (_, analytic, w) = eval(&values, None);
    let mut worst: f64 = 0.0;
    for (k, vals) in values.iter().enumerate() {
        for j in 0..vals.len() {
            let mut plus = values.clone();
            plus[k][j] += FD_STEP;
            let mut minus = values.clone();
            minus[k][j] -= FD_STEP;
            let fd = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][j], fd));
        }
    }
    worst
}

/// Every differentiable graph operation with inputs drawn from a domain on
/// which it is smooth.
pub fn op_cases() -> Vec<(&'static str, Vec<Input>, Builder)> {
    use Domain::*;
    vec![
        ("matmul", vec![inp(3, 4, Normal), inp(4, 2, Normal)], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_bt", vec![inp(3, 4, Normal), inp(2, 4, Normal)], Box::new(|g, v| g.matmul_bt(v[0], v[1]).unwrap())),
        (
            "batch_matvec",
            vec![inp(3, 6, Normal), inp(3, 2, Normal)],
            Box::new(|g, v| g.batch_matvec(v[0], v[1], 3).unwrap()),
        ),
        ("add", vec![inp(2, 3, Normal), inp(2, 3, Normal)], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![inp(2, 3, Normal), inp(2, 3, Normal)], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![inp(2, 3, Normal), inp(2, 3, Normal)], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("div", vec![inp(2, 3, Normal), inp(2, 3, Positive)], Box::new(|g, v| g.div(v[0], v[1]).unwrap())),
        ("add_row", vec![inp(3, 4, Normal), inp(1, 4, Normal)], Box::new(|g, v| g.add_row(v[0], v[1]).unwrap())),
        ("scale", vec![inp(2, 3, Normal)], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("neg", vec![inp(2, 3, Normal)], Box::new(|g, v| g.neg(v[0]))),
        ("offset", vec![inp(2, 3, Normal)], Box::new(|g, v| g.offset(v[0], 0.3))),
        ("relu", vec![inp(3, 3, AwayFromZero)], Box::new(|g, v| g.relu(v[0]))),
        ("tanh", vec![inp(3, 3, Normal)], Box::new(|g, v| g.tanh(v[0]))),
        ("sigmoid", vec![inp(3, 3, Normal)], Box::new(|g, v| g.sigmoid(v[0]))),
        ("exp", vec![inp(3, 3, Normal)], Box::new(|g, v| g.exp(v[0]))),
        ("log", vec![inp(3, 3, Positive)], Box::new(|g, v| g.log(v[0]))),
        ("softplus", vec![inp(3, 3, Normal)], Box::new(|g, v| g.softplus(v[0]))),
        ("clamp", vec![inp(3, 3, Unit)], Box::new(|g, v| g.clamp(v[0], 0.0, 1.0))),
        ("softmax_rows", vec![inp(3, 4, Normal)], Box::new(|g, v| g.softmax_rows(v[0]))),
        (
            "concat_cols",
            vec![inp(2, 2, Normal), inp(2, 3, Normal)],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        ("slice_cols", vec![inp(3, 5, Normal)], Box::new(|g, v| g.slice_cols(v[0], 1, 4).unwrap())),
        ("slice_rows", vec![inp(5, 2, Normal)], Box::new(|g, v| g.slice_rows(v[0], 1, 3).unwrap())),
        ("repeat_rows", vec![inp(2, 3, Normal)], Box::new(|g, v| g.repeat_rows(v[0], 3))),
        ("group_mean_rows", vec![inp(6, 2, Normal)], Box::new(|g, v| g.group_mean_rows(v[0], 3).unwrap())),
        ("sum", vec![inp(3, 3, Normal)], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![inp(3, 3, Normal)], Box::new(|g, v| g.mean(v[0]))),
        ("sum_cols", vec![inp(3, 4, Normal)], Box::new(|g, v| g.sum_cols(v[0]))),
        ("reshape", vec![inp(2, 6, Normal)], Box::new(|g, v| g.reshape(v[0], 4, 3).unwrap())),
        (
            "gru_cell",
            vec![
                inp(2, 3, Normal),
                inp(2, 4, Normal),
                inp(3, 12, Normal),
                inp(4, 12, Normal),
                inp(1, 12, Normal),
                inp(1, 12, Normal),
            ],
            Box::new(|g, v| g.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap()),
        ),
        (
            "concrete_log_density",
            vec![inp(3, 4, Simplex), inp(3, 4, Normal)],
            Box::new(|g, v| g.concrete_log_density(v[0], v[1], 0.7).unwrap()),
        ),
        (
            "binary_concrete_log_density",
            vec![inp(3, 4, Unit), inp(3, 4, Normal)],
            Box::new(|g, v| g.binary_concrete_log_density(v[0], v[1], 0.7).unwrap()),
        ),
        (
            "gated_logit_mix",
            vec![inp(3, 4, Normal), inp(3, 4, Normal), inp(3, 4, Unit)],
            Box::new(|g, v| g.gated_logit_mix(v[0], v[1], v[2]).unwrap()),
        ),
        (
            "bernoulli_log_lik",
            vec![inp(3, 5, Normal), inp(3, 5, Unit)],
            Box::new(|g, v| g.bernoulli_log_lik(v[0], v[1]).unwrap()),
        ),
    ]
}

/// Central differences of a parameter-store loss for a sample of
/// coordinates; returns the largest relative error.
pub fn check_params(
    store: &ParamStore,
    coords: usize,
    seed: u64,
    loss: &dyn Fn(&ParamStore) -> (f64, std::collections::BTreeMap<String, Tensor>),
) -> f64 {
    let (_, grads) = loss(store);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let name = &names[r.gen_range(0..names.len())];
        let len = store.get(name).unwrap().len();
        let j = r.gen_range(0..len);
        let mut plus = store.clone();
        plus.get_mut(name).unwrap().data_mut()[j] += FD_STEP;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap().data_mut()[j] -= FD_STEP;
        let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * FD_STEP);
        let e = rel_err(grads[name].data()[j], fd);
        worst = worst.max(e);
    }
    worst
}

/// Small model whose unrolled loss is checked against finite differences.
pub fn tiny_model_config(mode: SwitchMode) -> SvbfConfig {
    SvbfConfig {
        n_x: 2,
        n_u: 1,
        n_z: 2,
        n_s: 3,
        switch_mode: mode,
        k_init: 2,
        mc_kl_samples: 2,
        enc_hidden: 5,
        dec_hidden: 5,
        trans_hidden: 5,
        init_hidden: 5,
        rnn_hidden: 4,
        ..SvbfConfig::default()
    }
}

pub fn random_seq(n: usize, t: usize, d_x: usize, d_u: usize, seed: u64) -> SeqData {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * t * d_x).map(|_| r.sample(StandardNormal)).collect();
    let u = (0..n * t * d_u).map(|_| r.sample(StandardNormal)).collect();
    SeqData::new(n, t, d_x, d_u, x, u).unwrap()
}

/// Finite-difference check of the full negative ELBO with fixed noise.
pub fn check_model_unroll(cfg: SvbfConfig, seed: u64, coords: usize) -> f64 {
    let (model, mut store) = Svbf::new(cfg.clone(), seed).unwrap();
    // Zero-initialized biases put relu units exactly on their kink; move
    // every parameter to a generic point first.
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x7177);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let data = random_seq(2, 4, cfg.n_x, cfg.n_u, seed);
    let seeds = [seed * 2 + 1, seed * 2 + 2];
    let loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let mut noise = Noise::from_seeds(&seeds);
        let out = model.unroll(&mut g, s, &data, &mut noise, 1.5, UnrollOptions::default()).unwrap();
        (g.scalar(out.loss), g.grad(out.loss, s).unwrap())
    };
    check_params(&store, coords, seed, &loss)
}

/// Two-layer MLP 5→8→1 with tanh, loss = sum of outputs over a batch.
pub fn check_mlp(seed: u64) -> f64 {
    let mut store = ParamStore::new(seed);
    store.insert_normal("l1.w", &[5, 8], 0.5).unwrap();
    store.insert_normal("l1.b", &[1, 8], 0.5).unwrap();
    store.insert_normal("l2.w", &[8, 1], 0.5).unwrap();
    store.insert_normal("l2.b", &[1, 1], 0.5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..4 * 5).map(|_| r.sample(StandardNormal)).collect();
    let loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let xv = g.constant(4, 5, x.clone()).unwrap();
        let w1 = g.param(s, "l1.w").unwrap();
        let b1 = g.param(s, "l1.b").unwrap();
        let w2 = g.param(s, "l2.w").unwrap();
        let b2 = g.param(s, "l2.b").unwrap();
        let h = g.matmul(xv, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.tanh(h);
        let o = g.matmul(h, w2).unwrap();
        let o = g.add_row(o, b2).unwrap();
        let l = g.sum(o);
        (g.scalar(l), g.grad(l, s).unwrap())
    };
    // Check every coordinate: 5·8 + 8 + 8 + 1.
    let mut worst: f64 = 0.0;
    let (_, grads) = loss(&store);
    for (name, t) in store.iter() {
        for j in 0..t.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= FD_STEP;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[name].data()[j], fd));
        }
    }
    worst
}

/// Linear-Gaussian state-space model
/// `z_0 ~ N(m0, P0)`, `z_t = A z_{t−1} + B u_{t−1} + w`, `x_t = C z_t + d + v`.
#[derive(Clone, Debug)]
pub struct Lgssm {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl Lgssm {
    /// Random stable 2-D system with diagonal noise.
    pub fn random(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let theta: f64 = r.gen_range(0.2..0.5);
        let rho: f64 = r.gen_range(0.85..0.95);
        let a = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]) * rho;
        let mut n = || r.sample::<f64, _>(StandardNormal);
        let b = DMatrix::from_row_slice(2, 1, &[0.3 * n(), 0.3 * n()]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0 + 0.2 * n(), 0.3 * n(), 0.3 * n(), 1.0 + 0.2 * n()]);
        let d = DVector::from_row_slice(&[0.2 * n(), 0.2 * n()]);
        Self {
            a,
            b,
            c,
            d,
            q: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.05, 0.08])),
            r: DMatrix::from_diagonal(&DVector::from_row_slice(&[0.02, 0.03])),
            m0: DVector::zeros(2),
            p0: DMatrix::identity(2, 2),
        }
    }

    pub fn sample(&self, n: usize, t: usize, seed: u64) -> SeqData {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dz = self.a.nrows();
        let dx = self.c.nrows();
        let du = self.b.ncols();
        let chol_q = self.q.clone().cholesky().unwrap().l();
        let chol_r = self.r.clone().cholesky().unwrap().l();
        let chol_p = self.p0.clone().cholesky().unwrap().l();
        let mut x = Vec::with_capacity(n * t * dx);
        let mut u = Vec::with_capacity(n * t * du);
        let mut normal = |k: usize| DVector::from_fn(k, |_, _| r.sample::<f64, _>(StandardNormal));
        for _ in 0..n {
            let mut z = &self.m0 + &chol_p * normal(dz);
            for step in 0..t {
                let obs = &self.c * &z + &self.d + &chol_r * normal(dx);
                x.extend(obs.iter());
                let ctrl = normal(du);
                u.extend(ctrl.iter());
                if step + 1 < t {
                    z = &self.a * &z + &self.b * &ctrl + &chol_q * normal(dz);
                }
            }
        }
        SeqData::new(n, t, dx, du, x, u).unwrap()
    }

    /// Exact `log p(x_{0:T−1} | u)` per sequence by Kalman filtering.
    pub fn log_likelihood(&self, data: &SeqData) -> Vec<f64> {
        let dx = data.d_x;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        (0..data.n)
            .map(|i| {
                let mut m = self.m0.clone();
                let mut p = self.p0.clone();
                let mut ll = 0.0;
                for t in 0..data.t {
                    if t > 0 {
                        let base = (i * data.t + t - 1) * data.d_u;
                        let u = DVector::from_row_slice(&data.u[base..base + data.d_u]);
                        m = &self.a * &m + &self.b * u;
                        p = &self.a * &p * self.a.transpose() + &self.q;
                    }
                    let base = (i * data.t + t) * dx;
                    let x = DVector::from_row_slice(&data.x[base..base + dx]);
                    let innov = x - (&self.c * &m + &self.d);
                    let s = &self.c * &p * self.c.transpose() + &self.r;
                    let chol = s.clone().cholesky().unwrap();
                    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    let sol = chol.solve(&innov);
                    ll += -0.5 * (dx as f64 * ln2pi + log_det + innov.dot(&sol));
                    let k = &p * self.c.transpose() * chol.inverse();
                    m = &m + &k * innov;
                    p = (DMatrix::identity(p.nrows(), p.ncols()) - &k * &self.c) * p;
                }
                ll
            })
            .collect()
    }
}

/// Closed-form binary-Concrete density for the first coordinate `x` of a
/// 2-class Concrete with `α = exp(l₁ − l₂)`.
pub fn binary_concrete_pdf(x: f64, alpha: f64, lambda: f64) -> f64 {
    let num = lambda * alpha * x.powf(-lambda - 1.0) * (1.0 - x).powf(-lambda - 1.0);
    let den = alpha * x.powf(-lambda) + (1.0 - x).powf(-lambda);
    num / (den * den)
}

/// Composite Simpson's rule on the substitution `x = σ(y)`, which removes
/// the endpoint singularities of Concrete densities.
pub fn integrate_unit(f: impl Fn(f64) -> f64, n: usize) -> f64 {
    let (lo, hi) = (-40.0f64, 40.0f64);
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let g = |y: f64| {
        let x = 1.0 / (1.0 + (-y).exp());
        let dx = x * (1.0 - x);
        if dx == 0.0 || x <= 0.0 || x >= 1.0 {
            0.0
        } else {
            f(x) * dx
        }
    };
    let mut acc = g(lo) + g(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * g(lo + k as f64 * h);
    }
    acc * h / 3.0
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
