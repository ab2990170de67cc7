//! Hierarchical seed derivation.
//!
//! A run has one root seed. Independent streams (data, init, episode order,
//! per-fold evaluation) are derived by hashing the root with a label and
//! indices, so adding episodes to one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `parent`, a stream label and a path of indices.
pub fn derive_seed(parent: u64, label: &str, path: &[u64]) -> u64 {
    let mut h = splitmix64(parent);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &p in path {
        h = splitmix64(h ^ p);
    }
    h
}

pub fn rng_for(parent: u64, label: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label, path))
}
