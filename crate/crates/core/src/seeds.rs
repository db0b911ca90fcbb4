//! Deterministic RNG derivation.
//!
//! Every random draw in the pipeline comes from a ChaCha20 stream derived
//! from `(base seed, purpose tag, indices)`, so results do not depend on
//! call order or thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a purpose tag and an arbitrary index path.
pub fn derive_seed(base: u64, tag: &str, path: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for byte in tag.bytes() {
        state = splitmix64(state ^ u64::from(byte));
    }
    for &p in path {
        state = splitmix64(state ^ p);
    }
    state
}

/// ChaCha20 stream for `(base, tag, path)`.
pub fn derive_rng(base: u64, tag: &str, path: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, tag, path))
}
