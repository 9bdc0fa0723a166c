//! Seeded random streams.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` seeded from a
//! 64-bit value. ChaCha is counter-based and its output is specified
//! independently of platform, so seeds reproduce everywhere. Sub-streams are
//! derived by mixing a base seed with a purpose tag and an index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent seed for `(base, tag, index)`.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    mix(mix(base ^ fnv1a(tag.as_bytes())) ^ mix(index))
}

pub fn stream(base: u64, tag: &str, index: u64) -> Rng {
    from_seed(derive_seed(base, tag, index))
}

/// 64-bit FNV-1a, used to turn scene ids into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
