//! Deterministic per-realization random streams.
//!
//! Every realization owns one [`RandomStream`], a ChaCha8 generator seeded from
//! `realization_seed(base_seed, index)`. ChaCha output is specified bit-for-bit,
//! so a trajectory depends only on the seed and on the order of draws, never
//! on the platform or on how realizations are scheduled across threads.
//!
//! All draws made by the simulator are bounded integer draws through
//! [`RandomStream::index_below`], which consumes one or more `u64` words
//! (rejection sampling, Lemire's multiply-shift method).

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// 64-bit fractional part of the golden ratio.
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for realization `index`: `splitmix64(base_seed + (index + 1) * GOLDEN_GAMMA)`.
pub fn realization_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn from_seed(seed: u64) -> Self {
        RandomStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_realization(base_seed: u64, index: u64) -> Self {
        Self::from_seed(realization_seed(base_seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw from `0..n`. Panics if `n == 0`.
    pub fn index_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "index_below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Uniform draw from `0..n` excluding `skip`. Requires `skip < n` and `n >= 2`.
    pub fn index_below_except(&mut self, n: usize, skip: usize) -> usize {
        let r = self.index_below(n - 1);
        if r >= skip {
            r + 1
        } else {
            r
        }
    }

    /// Uniform real in `[0, 1)` with 53 bits of precision.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
