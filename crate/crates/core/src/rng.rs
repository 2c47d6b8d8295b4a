//! Deterministic RNG substream derivation.
//!
//! Every stochastic component takes an explicit seed and a path of indices
//! (replication, subject, purpose, ...), so parallel tasks draw from
//! independent streams and results are reproducible regardless of scheduling.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the substream identified by `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, path))
}

/// Deterministic child seed for the substream identified by `(seed, path)`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x517c_c1b7_2722_0a95);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x2545_f491_4f6c_dd1d)));
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let mut a = substream(7, &[1, 2]);
        let mut b = substream(7, &[1, 2]);
        let mut c = substream(7, &[2, 1]);
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        let xc: u64 = c.random();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }
}
