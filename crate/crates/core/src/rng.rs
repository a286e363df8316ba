//! Seed derivation. Every random draw in the pipeline comes from a
//! ChaCha stream keyed by a base seed plus a path of integers, so results
//! never depend on call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, kept distinct so independent consumers never share draws.
pub(crate) mod tag {
    pub const LEXICON: u64 = 1;
    pub const LANGUAGE: u64 = 2;
    pub const PHONEME_MEANS: u64 = 3;
    pub const UTTERANCE: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const SCHEDULE: u64 = 6;
    pub const BATCH: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const SPAN_MASK: u64 = 9;
    pub const PHONEME_NOISE: u64 = 10;
    pub const TEACHER: u64 = 11;
    pub const KMEANS: u64 = 12;
}
