//! Seed derivation and noise helpers. Every random stream in the crate is a
//! `ChaCha8Rng` keyed by a master seed and a tuple of stream identifiers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// splitmix64 finalizer applied to `a ⊕ rotate(b)`.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, ids: &[u64]) -> u64 {
    ids.iter().fold(mix(seed, 0x5eed), |acc, &id| mix(acc, id))
}

pub fn stream(seed: u64, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, ids))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw on the open interval (0, 1).
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(-open01(rng).ln()).ln()
}

pub fn logistic<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = open01(rng);
    u.ln() - (-u).ln_1p()
}
