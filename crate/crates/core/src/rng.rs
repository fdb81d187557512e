//! Seed derivation.
//!
//! Every random stream in a run is derived from one top-level seed:
//! `derive(seed, stream, index)` mixes the three with SplitMix64 so that,
//! for example, the dropout stream of step 12 and the AdvGen stream of
//! sentence 3 in step 12 never collide and never depend on execution
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const ADVGEN_SRC: u64 = 4;
    pub const ADVGEN_TRG: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const TOY_TASK: u64 = 7;
    pub const LM_PRETRAIN: u64 = 8;
    pub const LM_DROPOUT: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}
