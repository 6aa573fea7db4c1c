//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream derived from a
//! root seed and a stream label, so skipping one component never shifts the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser, used to decorrelate (seed, stream) pairs.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    Rng::seed_from_u64(mix64(seed ^ mix64(stream_id)))
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stream labels used by the agent and dataset code.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const CVAE: u64 = 3;
    pub const OOD: u64 = 4;
    pub const CRITIC: u64 = 5;
    pub const ACTOR: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const DATASET: u64 = 8;
    pub const SUBSAMPLE: u64 = 9;
}
