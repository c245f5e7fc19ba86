//! Keyed random streams.
//!
//! Every random draw in the crate comes from a generator keyed by
//! `(seed, stream, index)`, so Monte Carlo trials can be executed in any
//! order, on any number of workers, and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers used to separate independent draws that share a seed.
pub mod stream {
    pub const PROCESS_NOISE: u64 = 1;
    pub const MEASUREMENT_NOISE: u64 = 2;
    pub const INITIAL_STATE: u64 = 3;
    pub const PRIOR: u64 = 4;
    pub const TRIAL: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key tuple into a single 64-bit seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let h = splitmix64(seed);
    let h = splitmix64(h ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(h ^ index.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Generator for the given key.
pub fn keyed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Seed for Monte Carlo trial `trial` of a run seeded with `seed`.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    derive_seed(seed, stream::TRIAL, trial)
}
