//! Deterministic random-stream derivation.
//!
//! Every stochastic component draws from its own ChaCha stream keyed by
//! `(seed, domain, index)`. Streams are decorrelated and platform-stable,
//! so toggling one component never shifts the randomness seen by another,
//! and parallel or serial generation of per-item streams is bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive an owned random stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

/// Derive a child seed, for components that key their own sub-streams.
pub fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields >= 8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic() {
        let a: Vec<u64> = stream(7, "test", 3).random_iter().take(4).collect();
        let b: Vec<u64> = stream(7, "test", 3).random_iter().take(4).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ_by_domain_and_index() {
        let a: u64 = stream(7, "test", 0).random();
        let b: u64 = stream(7, "test", 1).random();
        let c: u64 = stream(7, "other", 0).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_seeds_are_stable() {
        assert_eq!(derive_seed(1, "x", 0), derive_seed(1, "x", 0));
        assert_ne!(derive_seed(1, "x", 0), derive_seed(2, "x", 0));
    }
}
