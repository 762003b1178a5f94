//! Seed derivation. Every stochastic routine takes an explicit seed; child
//! streams are derived from a root seed by counter so that parallel and
//! sequential execution consume identical random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer over `root` and `counter`.
pub fn derive(root: u64, counter: u64) -> u64 {
    let mut z = root
        .wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(root: u64, counter: u64) -> Rng {
    rng(derive(root, counter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_streams_differ_and_repeat() {
        assert_ne!(derive(7, 0), derive(7, 1));
        assert_eq!(derive(7, 3), derive(7, 3));
        let a: f64 = child_rng(1, 2).gen();
        let b: f64 = child_rng(1, 2).gen();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
