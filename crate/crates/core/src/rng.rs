//! Seed derivation and the deterministic RNG used everywhere in the crate.
//!
//! All randomness flows through [`ChaCha8Rng`] seeded by counter-based
//! mixing of a root seed, so every draw is a pure function of
//! (root seed, purpose, counter) and independent of call order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed from `seed` and a stream counter.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    mix64(seed ^ mix64(counter))
}

/// Derive a sub-seed from a seed and two counters (e.g. step and sample index).
pub fn derive_seed2(seed: u64, a: u64, b: u64) -> u64 {
    mix64(derive_seed(seed, a) ^ mix64(b.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Deterministic RNG for a (seed, counter) stream.
pub fn stream(seed: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, counter))
}
