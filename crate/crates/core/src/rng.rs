//! Seed derivation.
//!
//! A single root seed is expanded into named, indexed streams with a
//! counter-based mix, so a new consumer never shifts the values an existing
//! consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random number generator used everywhere in the crate.
pub type SimRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive the seed of stream `(purpose, index)` from `root`.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let base = splitmix64(root ^ fnv1a(purpose));
    splitmix64(base ^ splitmix64(index.wrapping_mul(GOLDEN_GAMMA)))
}

/// Generator for stream `(purpose, index)` under `root`.
pub fn stream(root: u64, purpose: &str, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(root, purpose, index))
}

pub fn from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
