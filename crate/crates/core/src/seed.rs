//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a base
//! seed mixed with a path of integers (stage, phase, epoch, batch, ...). No
//! generator state has to be carried between steps, which is what makes a
//! resumed run reproduce the uninterrupted one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each element of `path`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

/// Stream tags, so that unrelated consumers of the same base seed never share a
/// stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const NEGATIVES: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const GENERATE: u64 = 7;
    pub const ASSIGN: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_distinct() {
        assert_ne!(derive(1, &[0, 1]), derive(1, &[1, 0]));
        assert_ne!(derive(1, &[]), derive(2, &[]));
        assert_eq!(derive(7, &[3, 4]), derive(7, &[3, 4]));
    }
}
