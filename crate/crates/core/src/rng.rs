//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream identified by a root
//! seed and a short path of counters (group, replicate, draw index, ...).
//! Streams are independent of evaluation order, which keeps parallel
//! results identical to sequential ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of counters into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c.wrapping_add(0xA5A5_A5A5))))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags, so different consumers of one seed never collide.
pub(crate) mod tag {
    pub const SYNTHETIC: u64 = 1;
    pub const RESTART: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const SURROGATE_RESAMPLE: u64 = 4;
    pub const GENERATE: u64 = 5;
    pub const TRUTH: u64 = 6;
    pub const ITERATION: u64 = 7;
    pub const PLOT: u64 = 8;
}
