//! Seed derivation helpers.
//!
//! Sub-seeds are derived by mixing, never by drawing from a shared stream, so
//! work can be sharded across threads without changing any result.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string; stable across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a named purpose and index.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(seed ^ fnv1a(tag.as_bytes()) ^ splitmix64(index))
}

/// The reproducible RNG used everywhere in this workspace.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
