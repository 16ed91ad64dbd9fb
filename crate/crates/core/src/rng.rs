//! Seed derivation. Every random stream in the pipeline is a ChaCha8
//! generator keyed by a base seed mixed with a path of integer tags, so
//! independent streams never share state and can be created in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags, kept in one place so no two call sites collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SG_HEAD: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const TRAIN_MASK: u64 = 5;
    pub const VAL_MASK: u64 = 6;
    pub const PAIRS: u64 = 7;
    pub const CAP: u64 = 8;
    pub const SYNTH: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}
