//! Seed derivation. Every random decision in the crate flows from a `u64`
//! master seed through [`derive`] so that parallel and serial runs agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for `stream` from `master`.
pub fn derive(master: u64, stream: u64) -> u64 {
    mix(mix(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, stream: u64) -> Rng {
    seeded(derive(master, stream))
}

/// Named streams so unrelated consumers of one seed never share draws.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const MISSINGNESS: u64 = 2;
    pub const DOWNSAMPLE: u64 = 3;
    pub const CORPUS: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const IMPUTE: u64 = 7;
    pub const LABEL: u64 = 9;
    pub const INIT: u64 = 10;
}
