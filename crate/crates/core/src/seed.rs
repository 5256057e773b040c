//! Seed derivation.
//!
//! Every random stream in a run descends from one root seed. A child seed is
//! `mix(mix(root ^ fnv1a(tag)) ^ index)`, where `mix` is the SplitMix64
//! finalizer and `tag` names the consumer ("fold", "epoch", "augment", ...).
//! Streams with different tags or indices are therefore decorrelated, and a
//! stream never depends on how many draws another stream made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every seeded draw in the crate.
pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Child seed for stream `tag` number `index` under `root`.
pub fn derive(root: u64, tag: &str, index: u64) -> u64 {
    mix(mix(root ^ fnv1a(tag)) ^ index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, tag: &str, index: u64) -> Rng {
    rng(derive(root, tag, index))
}
