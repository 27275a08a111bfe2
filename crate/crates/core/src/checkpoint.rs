//! Training checkpoints: a directory holding `manifest.txt`, `params.bin`
//! (little-endian f64 blob) and `config.txt`. Loading restores parameters
//! and Adam state bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::diff::{OptimState, ParamStore, Tensor};

const MANIFEST_HEADER: &str = "svbf-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub fingerprint: String,
    pub params: ParamStore,
    pub optim: OptimState,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Tensor,
    AdamM,
    AdamV,
}

impl Kind {
    fn tag(self) -> &'static str {
        match self {
            Kind::Tensor => "tensor",
            Kind::AdamM => "adam_m",
            Kind::AdamV => "adam_v",
        }
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn new(config_text: String, fingerprint: String, params: ParamStore, optim: OptimState) -> Self {
        Self {
            config_text,
            fingerprint,
            params,
            optim,
        }
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    /// Write into `dir`. Files are staged in a sibling temporary directory
    /// and swapped in, so an interrupted save leaves the old checkpoint.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let staging = sibling(dir, "tmp");
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;

        let mut manifest = String::new();
        let o = &self.optim;
        writeln!(manifest, "{MANIFEST_HEADER}").unwrap();
        writeln!(manifest, "fingerprint {}", self.fingerprint).unwrap();
        writeln!(manifest, "step {}", o.step).unwrap();
        writeln!(manifest, "param_seed {}", self.params.rng_seed()).unwrap();
        // Optimizer scalars are stored as raw bits to survive the text trip.
        for (k, v) in [
            ("beta1", o.beta1),
            ("beta2", o.beta2),
            ("eps", o.eps),
            ("base_lr", o.base_lr),
            ("decay_rate", o.decay_rate),
            ("clip_norm", o.clip_norm),
        ] {
            writeln!(manifest, "{k} {:016x}", v.to_bits()).unwrap();
        }
        writeln!(manifest, "decay_every {}", o.decay_every).unwrap();

        let mut blob: Vec<u8> = Vec::new();
        let mut push = |kind: Kind, name: &str, t: &Tensor, manifest: &mut String| {
            writeln!(
                manifest,
                "{} {} f64 {} {}",
                kind.tag(),
                name,
                shape_str(t.shape()),
                blob.len()
            )
            .unwrap();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(Kind::Tensor, name, t, &mut manifest);
        }
        for (name, t) in &o.m {
            push(Kind::AdamM, name, t, &mut manifest);
        }
        for (name, t) in &o.v {
            push(Kind::AdamV, name, t, &mut manifest);
        }

        fs::write(staging.join("manifest.txt"), manifest)?;
        fs::write(staging.join("params.bin"), blob)?;
        fs::write(staging.join("config.txt"), &self.config_text)?;

        let old = sibling(dir, "old");
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        if dir.exists() {
            fs::rename(dir, &old)?;
        }
        fs::rename(&staging, dir)?;
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let blob = fs::read(dir.join("params.bin"))?;
        let config_text = fs::read_to_string(dir.join("config.txt"))?;

        let mut lines = manifest.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(bad("unrecognized manifest header"));
        }
        let mut fingerprint = None;
        let mut scalars: BTreeMap<String, String> = BTreeMap::new();
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut covered = 0usize;
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["fingerprint", f] => fingerprint = Some(f.to_string()),
                [kind @ ("tensor" | "adam_m" | "adam_v"), name, "f64", shape, offset] => {
                    let shape: Vec<usize> = shape
                        .split('x')
                        .map(|s| s.parse().map_err(|_| bad(format!("bad shape in '{line}'"))))
                        .collect::<Result<_, _>>()?;
                    let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in '{line}'")))?;
                    let len: usize = shape.iter().product();
                    let end = offset + 8 * len;
                    if end > blob.len() {
                        return Err(bad(format!("{name} runs past the end of params.bin")));
                    }
                    if offset != covered {
                        return Err(bad(format!("{name} does not start where the previous entry ended")));
                    }
                    covered = end;
                    let data: Vec<f64> = blob[offset..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
                    let target = match *kind {
                        "tensor" => &mut params,
                        "adam_m" => &mut m,
                        _ => &mut v,
                    };
                    if target.insert(name.to_string(), t).is_some() {
                        return Err(bad(format!("{kind} {name} listed twice")));
                    }
                }
                [k, val] => {
                    scalars.insert(k.to_string(), val.to_string());
                }
                _ => return Err(bad(format!("unreadable manifest line '{line}'"))),
            }
        }
        if covered != blob.len() {
            return Err(bad("params.bin has trailing bytes"));
        }
        let int = |k: &str| -> Result<u64, CheckpointError> {
            scalars
                .get(k)
                .ok_or_else(|| bad(format!("missing {k}")))?
                .parse()
                .map_err(|_| bad(format!("bad {k}")))
        };
        let bits = |k: &str| -> Result<f64, CheckpointError> {
            let s = scalars.get(k).ok_or_else(|| bad(format!("missing {k}")))?;
            u64::from_str_radix(s, 16)
                .map(f64::from_bits)
                .map_err(|_| bad(format!("bad {k}")))
        };
        let mut store = ParamStore::new(int("param_seed")?);
        for (name, t) in params {
            if !m.contains_key(&name) || !v.contains_key(&name) {
                return Err(bad(format!("no Adam moments for {name}")));
            }
            store.insert(&name, t).map_err(|e| bad(e.to_string()))?;
        }
        if m.len() != store.len() || v.len() != store.len() {
            return Err(bad("Adam moments for unknown parameters"));
        }
        let optim = OptimState {
            m,
            v,
            step: int("step")?,
            beta1: bits("beta1")?,
            beta2: bits("beta2")?,
            eps: bits("eps")?,
            base_lr: bits("base_lr")?,
            decay_rate: bits("decay_rate")?,
            decay_every: int("decay_every")?,
            clip_norm: bits("clip_norm")?,
        };
        Ok(Self {
            config_text,
            fingerprint: fingerprint.ok_or_else(|| bad("missing fingerprint"))?,
            params: store,
            optim,
        })
    }

    /// Check that the stored parameters have exactly the names and shapes of
    /// a freshly built model's store.
    pub fn check_against(&self, fresh: &ParamStore) -> Result<(), CheckpointError> {
        if fresh.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (name, t) in fresh.iter() {
            match self.params.get(name) {
                Some(s) if s.shape() == t.shape() => {}
                Some(s) => {
                    return Err(CheckpointError::Mismatch(format!(
                        "{name}: stored shape {:?}, model {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                None => return Err(CheckpointError::Mismatch(format!("{name} missing"))),
            }
        }
        Ok(())
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new(7);
        store.insert_normal("a.w", &[3, 2], 1.0).unwrap();
        store.insert_normal("b", &[1, 4], 0.3).unwrap();
        let mut optim = OptimState::new(&store, 1e-3, 0.95, 100);
        optim.step = 42;
        optim.m.get_mut("a.w").unwrap().data_mut()[1] = 0.1 + 0.2;
        optim.v.get_mut("b").unwrap().data_mut()[3] = f64::MIN_POSITIVE;
        Checkpoint::new("env = fhn\n".into(), "abc".into(), store, optim)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        // Overwrite in place.
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        sample().save(&path).unwrap();
        let blob = fs::read(path.join("params.bin")).unwrap();
        fs::write(path.join("params.bin"), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn shape_mismatch_detected() {
        let ck = sample();
        let mut other = ParamStore::new(0);
        other.insert_normal("a.w", &[2, 3], 1.0).unwrap();
        other.insert_normal("b", &[1, 4], 1.0).unwrap();
        assert!(ck.check_against(&other).is_err());
        assert!(ck.check_against(&ck.params).is_ok());
    }
}
