//! Seeded randomness and hashing utilities.
//!
//! Every stochastic choice in the crate draws from a ChaCha stream derived
//! from the experiment seed plus a role tag, so a `(seed, config)` pair maps
//! to one bit-exact execution regardless of platform.

use crate::fmath;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x00000100000001b3;

/// FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

/// FNV-1a continuing from a previous hash state.
pub fn fnv1a_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Deterministic sub-seed: the root seed mixed with a role tag and indices.
pub fn subseed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a_extend(FNV_OFFSET, &seed.to_le_bytes());
    h = fnv1a_extend(h, tag.as_bytes());
    for &i in indices {
        h = fnv1a_extend(h, &i.to_le_bytes());
    }
    h
}

/// Deterministic sub-stream seeded from `subseed`.
pub fn substream(seed: u64, tag: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(subseed(seed, tag, indices))
}

/// Uniform draw in `[0, 1)` with 53 bits of entropy.
pub fn uniform(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut Rng) -> f64 {
    // u1 in (0, 1] so the log stays finite.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
    let u2 = uniform(rng);
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

/// Uniform integer in `[0, n)`.
pub fn below(rng: &mut Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
