//! Seed derivation for independent random streams.
//!
//! Every stochastic draw in a run comes from a stream keyed by
//! `(global seed, purpose, indices...)`, so results do not depend on the order
//! in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of stream indices.
pub fn derive_seed(seed: u64, indices: &[u64]) -> u64 {
    indices.iter().fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

pub fn stream(seed: u64, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, indices))
}

/// Stream purposes.
pub const EPISODES: u64 = 1;
pub const ROLLOUTS: u64 = 2;
