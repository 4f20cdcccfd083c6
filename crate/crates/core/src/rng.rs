//! Seeded random streams.
//!
//! Every consumer of randomness derives its generator from a 64-bit seed and a
//! stream tag, so that adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract; do not renumber.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Data = 3,
    TestData = 4,
    PoisonSelect = 5,
    PoisonNoise = 6,
    FreshNoise = 7,
    GradientNoise = 8,
    Restart = 9,
    FeatureMap = 10,
    ForgetBatches = 11,
    Targets = 12,
    Subset = 13,
}

pub fn stream(seed: u64, tag: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag as u64);
    rng
}

/// Derive a child seed, e.g. one per restart or per replicate.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
