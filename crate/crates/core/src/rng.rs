//! Deterministic seed derivation.
//!
//! Every stochastic phase of a run draws from its own ChaCha stream derived
//! from `(seed, tag, index)`. A resumed run therefore needs only the model and
//! optimizer state, never a serialized generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for phase `tag`, step `index` of the run seeded with `seed`.
pub fn derive(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index);
    ChaCha8Rng::seed_from_u64(mixed)
}

pub mod tags {
    pub const INIT: u64 = 1;
    pub const BEHAVIOR_CLONE: u64 = 2;
    pub const WARM_CRITIC: u64 = 3;
    pub const WARM_RATIO: u64 = 4;
    pub const UPDATE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const BANDWIDTH: u64 = 7;
    pub const COLLECT: u64 = 8;
    pub const SMOOTH: u64 = 9;
}
