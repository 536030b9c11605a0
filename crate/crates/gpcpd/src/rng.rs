// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic seed derivation for independent RNG streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; well-distributed even for consecutive inputs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a stream tag. Streams with
/// distinct tags are independent for all practical purposes; the derivation
/// is a pure function, so work can be re-partitioned across workers without
/// changing results.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(tag.wrapping_mul(0x9e3779b97f4a7c15)))
}

/// Stream tags for the pipeline's RNG consumers.
pub mod tags {
    pub const EVIDENCE: u64 = 0x45564944;
    pub const BOOTSTRAP: u64 = 0x424f4f54;
    pub const SEGMENT: u64 = 0x5345474d;
    pub const EXPERIMENT_DATA: u64 = 0x44415441;
    pub const EXPERIMENT_PIPE: u64 = 0x50495045;
}

/// Deterministic, platform-stable RNG seeded from a derived seed.
pub fn rng_from(master: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}
