//! Seeded RNG helpers shared by data generation and parameter init.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic stream for a (seed, stage) pair, so pipeline stages draw
/// independently without order coupling.
pub fn stream(seed: u64, stage: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let tag = stage.as_bytes();
    for (i, b) in tag.iter().enumerate().take(24) {
        key[8 + i] = *b;
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw on [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
