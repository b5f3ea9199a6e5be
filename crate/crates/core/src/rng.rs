//! Deterministic stream derivation.
//!
//! Every stochastic routine takes a `u64` seed and derives an independent
//! ChaCha stream keyed on (seed, tag, index). Hashing through SHA-256 keeps
//! streams decorrelated and platform-independent, and lets parallel loops
//! hand each work unit its own generator without sharing state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Derive a generator for (`seed`, `tag`, `index`).
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}
