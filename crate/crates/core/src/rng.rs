//! Seed derivation shared by every stochastic component.
//!
//! All randomness flows from `ChaCha8Rng`, whose output stream is fixed across
//! platforms, seeded through [`mix`] so that per-item streams are independent
//! of iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// SplitMix64 finalizer applied to `base ^ golden·(index+1)`.
pub fn mix(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, index: u64) -> LabRng {
    rng_from(mix(base, index))
}
