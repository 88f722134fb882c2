//! Keyed random streams. Every stochastic step in the crate draws from a
//! stream derived from `(seed, key parts)`, never from a shared generator,
//! so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Stream domain tags.
pub(crate) const TAG_VIEW_A: u64 = 0xA;
pub(crate) const TAG_VIEW_B: u64 = 0xB;
pub(crate) const TAG_BATCHES: u64 = 0xBA7C;
pub(crate) const TAG_SOURCE: u64 = 0x5;
pub(crate) const TAG_TARGET: u64 = 0x7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A stream keyed by `seed` and an ordered list of key parts.
pub fn stream(seed: u64, parts: &[u64]) -> Stream {
    let key = parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)));
    ChaCha8Rng::seed_from_u64(key)
}

/// 64-bit FNV-1a of a string; stable across platforms and releases.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
