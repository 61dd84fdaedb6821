//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a master seed plus a path of stream identifiers, so independent
//! tasks never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` with each element of `path` into a single 64-bit key.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

// Stream tags.
pub(crate) const TAG_CHANNEL: u64 = 1;
pub(crate) const TAG_INIT: u64 = 2;
pub(crate) const TAG_SHUFFLE: u64 = 3;
pub(crate) const TAG_INPUT_NOISE: u64 = 4;
pub(crate) const TAG_PRIOR: u64 = 5;
pub(crate) const TAG_OBSERVE: u64 = 6;
pub(crate) const TAG_EVAL_NOISE: u64 = 7;
