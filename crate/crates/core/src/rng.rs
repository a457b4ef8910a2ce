// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams. Every stochastic routine in the crate draws from a
//! `ChaCha8Rng` derived from an explicit 64-bit seed, so outputs are pure
//! functions of their seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed (splitmix64 finalizer over `seed ⊕ tag`).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child(seed: u64, tag: u64) -> Stream {
    stream(derive_seed(seed, tag))
}
