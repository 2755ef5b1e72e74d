//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed
//! by the master seed plus a fixed tag path, so streams never overlap and do
//! not depend on the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `master`, one splitmix round per tag.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

// Stream tags.
pub const TAG_GENERATOR_INIT: u64 = 1;
pub const TAG_DISCRIMINATOR_INIT: u64 = 2;
pub const TAG_TRAIN: u64 = 3;
pub const TAG_EVAL_GRID: u64 = 4;
pub const TAG_SHUFFLE: u64 = 5;
pub const TAG_AUGMENT: u64 = 6;
pub const TAG_PHANTOM: u64 = 7;
pub const TAG_SAMPLES: u64 = 8;
