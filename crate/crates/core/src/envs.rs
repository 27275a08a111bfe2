//! Ground-truth simulators and the dataset container.
//!
//! * FitzHugh-Nagumo oscillator integrated with RK4, stimulus recorded as
//!   the control.
//! * Balls in an axis-aligned box (optionally with inner walls), observed
//!   through their positions or a rendered 32×32 binary frame.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::SeqData;
use crate::rng;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("state became non-finite in trajectory {traj} at step {step}")]
    NonFinite { traj: usize, step: usize },
    #[error("ball {ball} starts outside the box")]
    OutsideBox { ball: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("dataset file is truncated")]
    Truncated,
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("no aux block named '{0}'")]
    MissingAux(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const TAG_FHN: u64 = 0xf4a;
const TAG_BOX: u64 = 0xb0c;

/// Named per-step extra values `[N, T, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxBlock {
    pub name: String,
    pub width: usize,
    pub data: Vec<f32>,
}

/// `x[N,T,d_x]`, `u[N,T,d_u]` plus aux blocks, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub n: usize,
    pub t: usize,
    pub d_x: usize,
    pub d_u: usize,
    pub x: Vec<f32>,
    pub u: Vec<f32>,
    pub aux: Vec<AuxBlock>,
}

impl TrajectoryBatch {
    pub fn aux(&self, name: &str) -> Result<&AuxBlock, EnvError> {
        self.aux
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| EnvError::MissingAux(name.to_string()))
    }

    pub fn to_seq_data(&self) -> SeqData {
        SeqData {
            n: self.n,
            t: self.t,
            d_x: self.d_x,
            d_u: self.d_u,
            x: self.x.iter().map(|&v| v as f64).collect(),
            u: self.u.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Serialized form:
    /// `"SVBF" | u32 version | u32 N | u32 T | u32 d_x | u32 d_u | u32 n_aux |
    /// (u32 name_len | name | u32 width)* | f32 x | f32 u | f32 aux*`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * (self.x.len() + self.u.len()));
        out.extend_from_slice(b"SVBF");
        for v in [1, self.n, self.t, self.d_x, self.d_u, self.aux.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for a in &self.aux {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.width as u32).to_le_bytes());
        }
        for v in self.x.iter().chain(&self.u) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for a in &self.aux {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 {
            return Err(EnvError::Truncated);
        }
        if &bytes[..4] != b"SVBF" {
            return Err(EnvError::BadMagic);
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != 1 {
            return Err(EnvError::BadVersion(version));
        }
        let n = r.u32()? as usize;
        let t = r.u32()? as usize;
        let d_x = r.u32()? as usize;
        let d_u = r.u32()? as usize;
        let n_aux = r.u32()? as usize;
        let mut descs = Vec::with_capacity(n_aux.min(1024));
        for _ in 0..n_aux {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| EnvError::Malformed("aux name is not UTF-8".into()))?;
            let width = r.u32()? as usize;
            descs.push((name, width));
        }
        let x = r.f32s(n * t * d_x)?;
        let u = r.f32s(n * t * d_u)?;
        let mut aux = Vec::with_capacity(descs.len());
        for (name, width) in descs {
            let data = r.f32s(n * t * width)?;
            aux.push(AuxBlock { name, width, data });
        }
        if r.pos != bytes.len() {
            return Err(EnvError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { n, t, d_x, d_u, x, u, aux })
    }

    pub fn write(&self, path: &Path) -> Result<(), EnvError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, EnvError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvError> {
        let end = self.pos.checked_add(n).ok_or(EnvError::Truncated)?;
        if end > self.bytes.len() {
            return Err(EnvError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EnvError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, EnvError> {
        let raw = self.take(n.checked_mul(4).ok_or(EnvError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FhnParams {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub i_mean: f64,
    pub i_var: f64,
    pub dt: f64,
    pub substeps: usize,
    pub init_range: f64,
    /// Trailing steps withheld from training, marked in the `eval_mask` aux.
    pub eval_tail: usize,
}

impl Default for FhnParams {
    fn default() -> Self {
        Self {
            a: 0.7,
            b: 0.8,
            tau: 12.5,
            i_mean: 0.7,
            i_var: 0.04,
            dt: 0.1,
            substeps: 1,
            init_range: 3.0,
            eval_tail: 30,
        }
    }
}

/// `(v̇, ẇ)` with `v̇ = v − v³/3 − w + I`, `τẇ = v + a − bw`.
pub fn fhn_deriv(p: &FhnParams, v: f64, w: f64, i_ext: f64) -> (f64, f64) {
    (v - v * v * v / 3.0 - w + i_ext, (v + p.a - p.b * w) / p.tau)
}

pub fn fhn_rk4(p: &FhnParams, v: f64, w: f64, i_ext: f64, h: f64) -> (f64, f64) {
    let (k1v, k1w) = fhn_deriv(p, v, w, i_ext);
    let (k2v, k2w) = fhn_deriv(p, v + 0.5 * h * k1v, w + 0.5 * h * k1w, i_ext);
    let (k3v, k3w) = fhn_deriv(p, v + 0.5 * h * k2v, w + 0.5 * h * k2w, i_ext);
    let (k4v, k4w) = fhn_deriv(p, v + h * k3v, w + h * k3w, i_ext);
    (
        v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
        w + h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w),
    )
}

/// Observation `t` is the state after `t` observation intervals; the stimulus
/// drawn for interval `t → t+1` is stored as `u_t`.
pub fn fhn_generate(p: &FhnParams, n_traj: usize, t_len: usize, seed: u64) -> Result<TrajectoryBatch, EnvError> {
    if !(p.tau > 0.0 && p.dt > 0.0 && p.substeps > 0 && p.i_var >= 0.0) {
        return Err(EnvError::Params("FHN needs tau > 0, dt > 0, substeps >= 1".into()));
    }
    let mut x = Vec::with_capacity(n_traj * t_len * 2);
    let mut u = Vec::with_capacity(n_traj * t_len);
    let h = p.dt / p.substeps as f64;
    let i_std = p.i_var.sqrt();
    for traj in 0..n_traj {
        let mut r = rng::stream(seed, &[TAG_FHN, traj as u64]);
        let mut v = r.gen_range(-p.init_range..=p.init_range);
        let mut w = r.gen_range(-p.init_range..=p.init_range);
        for step in 0..t_len {
            let i_ext = p.i_mean + i_std * rng::normal(&mut r);
            x.push(v as f32);
            x.push(w as f32);
            u.push(i_ext as f32);
            for _ in 0..p.substeps {
                (v, w) = fhn_rk4(p, v, w, i_ext, h);
            }
            if !(v.is_finite() && w.is_finite()) {
                return Err(EnvError::NonFinite { traj, step });
            }
        }
    }
    let mask: Vec<f32> = (0..n_traj)
        .flat_map(|_| (0..t_len).map(|s| if s + p.eval_tail >= t_len { 1.0 } else { 0.0 }))
        .collect();
    Ok(TrajectoryBatch {
        n: n_traj,
        t: t_len,
        d_x: 2,
        d_u: 1,
        x,
        u,
        aux: vec![AuxBlock {
            name: "eval_mask".into(),
            width: 1,
            data: mask,
        }],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Axis-aligned inner wall: `axis == X` is a vertical segment at `x = at`
/// spanning `y ∈ [from, to]`; `axis == Y` a horizontal one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wall {
    pub axis: Axis,
    pub at: f64,
    pub from: f64,
    pub to: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxWorld {
    /// Box is `[−bound, bound]²`.
    pub bound: f64,
    pub n_balls: usize,
    pub radius: f64,
    /// Physics step.
    pub dt: f64,
    /// Physics steps per observation.
    pub substeps: usize,
    pub control_gain: f64,
    pub max_speed: f64,
    pub init_speed: f64,
    pub walls: Vec<Wall>,
}

impl Default for BoxWorld {
    fn default() -> Self {
        Self {
            bound: 1.0,
            n_balls: 1,
            radius: 0.05,
            dt: 0.02,
            substeps: 5,
            control_gain: 1.0,
            max_speed: 2.0,
            init_speed: 1.0,
            walls: Vec::new(),
        }
    }
}

impl BoxWorld {
    /// Two vertical inner walls rising from the bottom, forming a U with the
    /// floor.
    pub fn maze_walls() -> Vec<Wall> {
        vec![
            Wall {
                axis: Axis::X,
                at: -0.35,
                from: -1.0,
                to: 0.35,
            },
            Wall {
                axis: Axis::X,
                at: 0.35,
                from: -1.0,
                to: 0.35,
            },
        ]
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.dt > 0.0) || self.substeps == 0 || self.n_balls == 0 || !(self.bound > self.radius) {
            return Err(EnvError::Params("box world needs dt > 0, substeps >= 1, balls >= 1, bound > radius".into()));
        }
        Ok(())
    }
}

/// Per-ball `(px, py, vx, vy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BallState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
}

fn reflect_interval(p: &mut f64, v: &mut f64, lo: f64, hi: f64) -> bool {
    let mut hit = false;
    // A single reflection suffices for |Δp| below the box width.
    if *p > hi {
        *p = 2.0 * hi - *p;
        *v = -*v;
        hit = true;
    } else if *p < lo {
        *p = 2.0 * lo - *p;
        *v = -*v;
        hit = true;
    }
    hit
}

/// One semi-implicit Euler step of length `dt` with per-ball accelerations
/// `control_gain·u`. Walls reflect position and negate the normal velocity;
/// returns per-ball, per-axis contact flags.
pub fn box_step(world: &BoxWorld, state: &BallState, u: &[f64], dt: f64) -> Result<(BallState, Vec<[bool; 2]>), EnvError> {
    let lim = world.bound - world.radius;
    for (ball, p) in state.pos.iter().enumerate() {
        if p.iter().any(|c| c.abs() > lim + 1e-12) {
            return Err(EnvError::OutsideBox { ball });
        }
    }
    let mut next = state.clone();
    let mut flags = vec![[false; 2]; state.pos.len()];
    for b in 0..state.pos.len() {
        for a in 0..2 {
            let acc = u.get(2 * b + a).copied().unwrap_or(0.0) * world.control_gain;
            let v = (state.vel[b][a] + dt * acc).clamp(-world.max_speed, world.max_speed);
            next.vel[b][a] = v;
            next.pos[b][a] = state.pos[b][a] + dt * v;
        }
        for wall in &world.walls {
            let (a, o) = match wall.axis {
                Axis::X => (0, 1),
                Axis::Y => (1, 0),
            };
            let other = next.pos[b][o];
            if other < wall.from - world.radius || other > wall.to + world.radius {
                continue;
            }
            let before = state.pos[b][a];
            let after = next.pos[b][a];
            let left = wall.at - world.radius;
            let right = wall.at + world.radius;
            if before <= left && after > left {
                next.pos[b][a] = 2.0 * left - after;
                next.vel[b][a] = -next.vel[b][a];
                flags[b][a] = true;
            } else if before >= right && after < right {
                next.pos[b][a] = 2.0 * right - after;
                next.vel[b][a] = -next.vel[b][a];
                flags[b][a] = true;
            }
        }
        for a in 0..2 {
            let (mut p, mut v) = (next.pos[b][a], next.vel[b][a]);
            if reflect_interval(&mut p, &mut v, -lim, lim) {
                flags[b][a] = true;
            }
            next.pos[b][a] = p;
            next.vel[b][a] = v;
        }
    }
    Ok((next, flags))
}

/// Random start inside the box and clear of inner walls.
fn random_start<R: Rng>(world: &BoxWorld, r: &mut R) -> BallState {
    let lim = world.bound - world.radius;
    let mut pos = Vec::with_capacity(world.n_balls);
    let mut vel = Vec::with_capacity(world.n_balls);
    for _ in 0..world.n_balls {
        let p = loop {
            let cand = [r.gen_range(-lim..=lim), r.gen_range(-lim..=lim)];
            let clear = world.walls.iter().all(|w| {
                let (a, o) = match w.axis {
                    Axis::X => (0, 1),
                    Axis::Y => (1, 0),
                };
                (cand[a] - w.at).abs() > world.radius || cand[o] < w.from - world.radius || cand[o] > w.to + world.radius
            });
            if clear {
                break cand;
            }
        };
        pos.push(p);
        vel.push([
            r.gen_range(-world.init_speed..=world.init_speed),
            r.gen_range(-world.init_speed..=world.init_speed),
        ]);
    }
    BallState { pos, vel }
}

/// Positions as observations, uniform `[−1,1]` controls held over each
/// observation interval. Aux blocks: `velocity` and `collisions` (contact in
/// the interval leading to the observation), both `2·n_balls` wide.
pub fn box_generate(world: &BoxWorld, n_traj: usize, t_len: usize, policy_seed: u64) -> Result<TrajectoryBatch, EnvError> {
    world.validate()?;
    let d = 2 * world.n_balls;
    let mut x = Vec::with_capacity(n_traj * t_len * d);
    let mut u = Vec::with_capacity(n_traj * t_len * d);
    let mut vel = Vec::with_capacity(n_traj * t_len * d);
    let mut col = Vec::with_capacity(n_traj * t_len * d);
    for traj in 0..n_traj {
        let mut r = rng::stream(policy_seed, &[TAG_BOX, traj as u64]);
        let mut state = random_start(world, &mut r);
        let mut flags = vec![[false; 2]; world.n_balls];
        for _ in 0..t_len {
            for b in 0..world.n_balls {
                for a in 0..2 {
                    x.push((state.pos[b][a] / world.bound) as f32);
                    vel.push(state.vel[b][a] as f32);
                    col.push(if flags[b][a] { 1.0 } else { 0.0 });
                }
            }
            let ctrl: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..=1.0)).collect();
            u.extend(ctrl.iter().map(|&c| c as f32));
            flags = vec![[false; 2]; world.n_balls];
            for _ in 0..world.substeps {
                let (next, f) = box_step(world, &state, &ctrl, world.dt)?;
                for (acc, new) in flags.iter_mut().zip(f) {
                    acc[0] |= new[0];
                    acc[1] |= new[1];
                }
                state = next;
            }
        }
    }
    Ok(TrajectoryBatch {
        n: n_traj,
        t: t_len,
        d_x: d,
        d_u: d,
        x,
        u,
        aux: vec![
            AuxBlock {
                name: "velocity".into(),
                width: d,
                data: vel,
            },
            AuxBlock {
                name: "collisions".into(),
                width: d,
                data: col,
            },
        ],
    })
}

pub const IMAGE_SIDE: usize = 32;

/// Row-major 32×32 binary frame (row 0 at the top). A pixel is set iff its
/// center lies within the ball radius.
pub fn render_image(world: &BoxWorld, pos: [f64; 2]) -> Vec<u8> {
    let pitch = 2.0 * world.bound / IMAGE_SIDE as f64;
    let mut img = vec![0u8; IMAGE_SIDE * IMAGE_SIDE];
    for row in 0..IMAGE_SIDE {
        let cy = world.bound - (row as f64 + 0.5) * pitch;
        for col in 0..IMAGE_SIDE {
            let cx = -world.bound + (col as f64 + 0.5) * pitch;
            let d2 = (cx - pos[0]).powi(2) + (cy - pos[1]).powi(2);
            if d2 <= world.radius * world.radius {
                img[row * IMAGE_SIDE + col] = 1;
            }
        }
    }
    img
}

/// Single-ball trajectories observed as rendered frames (`d_x = 1024`). The
/// underlying positions are kept in the `position` aux block.
pub fn image_generate(world: &BoxWorld, n_traj: usize, t_len: usize, seed: u64) -> Result<TrajectoryBatch, EnvError> {
    if world.n_balls != 1 {
        return Err(EnvError::Params("image rendering supports a single ball".into()));
    }
    let states = box_generate(world, n_traj, t_len, seed)?;
    let px = IMAGE_SIDE * IMAGE_SIDE;
    let mut x = Vec::with_capacity(n_traj * t_len * px);
    for p in states.x.chunks_exact(2) {
        let img = render_image(world, [p[0] as f64 * world.bound, p[1] as f64 * world.bound]);
        x.extend(img.iter().map(|&b| b as f32));
    }
    let mut aux = states.aux;
    aux.push(AuxBlock {
        name: "position".into(),
        width: 2,
        data: states.x,
    });
    Ok(TrajectoryBatch {
        n: n_traj,
        t: t_len,
        d_x: px,
        d_u: 2,
        x,
        u: states.u,
        aux,
    })
}
