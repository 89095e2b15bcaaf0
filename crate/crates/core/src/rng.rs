//! Seed derivation for independent random streams.
//!
//! Every consumer of randomness (initialization, shuffling, attack noise,
//! selection) draws from its own stream keyed off the run seed, so enabling
//! one feature never shifts the random numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags used by the trainer and selectors.
pub mod tag {
    pub const INIT: u64 = 0x1001;
    pub const SHUFFLE: u64 = 0x1002;
    pub const TRAIN_ATTACK: u64 = 0x1003;
    pub const SELECTION: u64 = 0x1004;
    pub const PROBE: u64 = 0x1005;
    pub const EVAL: u64 = 0x1006;
    pub const TRACK: u64 = 0x1007;
    pub const INITIAL_SUBSET: u64 = 0x1008;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines two keys into a well-mixed 64-bit seed.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(17) ^ 0xA076_1D64_78BD_642F)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    Rng::seed_from_u64(mix(seed, tag))
}

/// Per-example noise keys: one key per global example index.
pub fn example_keys(base: u64, indices: &[usize]) -> Vec<u64> {
    indices.iter().map(|&i| mix(base, i as u64)).collect()
}
