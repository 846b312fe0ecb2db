//! Deterministic RNG derivation.
//!
//! All randomness flows from a single 64-bit master seed. Each consumer
//! derives its own stream from (seed, component label, index), so adding or
//! reordering parallel work never changes the numbers a component sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent RNG stream for (seed, label, index).
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&0x9e3779b97f4a7c15u64.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = derive_rng(7, "x", 0).random();
        let b: f64 = derive_rng(7, "x", 0).random();
        let c: f64 = derive_rng(7, "x", 1).random();
        let d: f64 = derive_rng(7, "y", 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
