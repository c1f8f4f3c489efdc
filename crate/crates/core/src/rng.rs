//! Deterministic stream derivation for parallel replicates.
//!
//! Every replicate gets its own [`RngStream`] derived from `(root_seed, index)`,
//! so results are a pure function of the root seed and the replicate index —
//! independent of worker count and scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG handed to kernels, samplers and couplings.
pub type RngStream = ChaCha8Rng;

/// SplitMix64 finaliser: a cheap bijective mix with good avalanche behaviour.
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Derives the seed for stream `index` under `root_seed`.
///
/// Distinct `(root_seed, index)` pairs map to distinct-looking seeds even when
/// roots or indices are small consecutive integers, which is the common case.
pub fn derive_seed(root_seed: u64, index: u64) -> u64 {
    mix64(root_seed.wrapping_add(mix64(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))))
}

/// Stream for replicate `index` under `root_seed`.
pub fn stream(root_seed: u64, index: u64) -> RngStream {
    RngStream::seed_from_u64(derive_seed(root_seed, index))
}

/// Stream from an already-derived seed, for callers that carry explicit seed
/// lists instead of `(root, index)` pairs.
pub fn stream_from_seed(seed: u64) -> RngStream {
    RngStream::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(derive_seed(42, 7), derive_seed(42, 7));
        let a: u64 = stream(42, 7).random();
        let b: u64 = stream(42, 7).random();
        assert_eq!(a, b);
    }

    #[test]
    fn consecutive_indices_give_distinct_seeds() {
        let seeds: HashSet<u64> = (0..10_000).map(|i| derive_seed(0, i)).collect();
        assert_eq!(seeds.len(), 10_000);
        // Different roots decorrelate too.
        assert_ne!(derive_seed(0, 3), derive_seed(1, 3));
    }

    #[test]
    fn streams_look_independent_of_index_structure() {
        // Crude check: first draws from consecutive streams should not be
        // monotone in the index (they would be under a naive seed = root + i).
        let firsts: Vec<u64> = (0..32).map(|i| stream(1, i).random()).collect();
        let sorted = {
            let mut s = firsts.clone();
            s.sort_unstable();
            s
        };
        assert_ne!(firsts, sorted);
    }
}
