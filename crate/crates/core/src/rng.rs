//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by a base seed plus a path of integer tags, so independent
//! consumers (split, init, dropout per step, strategy per step) never share
//! a stream and results do not depend on call order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept in one place so two consumers never collide.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN_DROPOUT: u64 = 3;
    pub const MC_DROPOUT: u64 = 4;
    pub const RANDOM_STRATEGY: u64 = 5;
    pub const GAMMA: u64 = 6;
    pub const KMEANS: u64 = 7;
    pub const SBM_EDGES: u64 = 8;
    pub const SBM_FEATURES: u64 = 9;
}
