//! Seeded random streams. Every operation that needs randomness derives its
//! own ChaCha stream from a user seed plus a fixed tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// splitmix64 finalizer; mixes a seed with a stream tag and index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

// Stream tags.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_P1: u64 = 2;
pub(crate) const TAG_P2: u64 = 3;
pub(crate) const TAG_P3: u64 = 4;
pub(crate) const TAG_PGD: u64 = 5;
pub(crate) const TAG_SHUFFLE: u64 = 6;
pub(crate) const TAG_SYNTH: u64 = 7;
pub(crate) const TAG_SPLIT: u64 = 8;
