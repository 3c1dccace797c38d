//! Seed derivation so every stochastic stage gets an independent, reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a parent seed with a stream tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Tags for the pipeline stages.
pub mod stream {
    pub const AUGMENT: u64 = 1;
    pub const FOLDS: u64 = 2;
    pub const PHASE: u64 = 3;
    pub const AUTOENCODER: u64 = 4;
    pub const REFINE: u64 = 5;
    pub const INNER_SPLIT: u64 = 6;
    pub const FOREST_RF: u64 = 7;
    pub const FOREST_ET: u64 = 8;
    pub const TRANSFORMER: u64 = 9;
    pub const CNN: u64 = 10;
    pub const FFNN: u64 = 11;
    pub const REFIT: u64 = 12;
    pub const FOLD_BASE: u64 = 1000;
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    rng(derive(seed, tag))
}
