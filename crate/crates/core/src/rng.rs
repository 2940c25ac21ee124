//! Portable, counter-based random streams.
//!
//! Every stochastic choice in the crate draws from [`Stream`], a thin wrapper
//! over ChaCha8. Seeding is fully specified so golden fixtures reproduce on
//! any platform:
//!
//! * the 256-bit key is `ChaCha8Rng::seed_from_u64(seed)` (rand_core 0.6
//!   PCG32 key expansion);
//! * the 64-bit ChaCha stream id is the SplitMix64 fold of the caller's tag
//!   words (see [`fold_tags`]);
//! * the block counter starts at zero.
//!
//! Conversions to `f64` and bounded integers are done here rather than via
//! `rand` distributions so that outputs do not depend on a distribution
//! crate's version.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds tag words into one 64-bit stream id.
pub fn fold_tags(tags: &[u64]) -> u64 {
    tags.iter().fold(GOLDEN_GAMMA, |acc, &t| {
        splitmix64(acc.wrapping_add(GOLDEN_GAMMA) ^ splitmix64(t))
    })
}

#[derive(Clone, Debug)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self::tagged(seed, &[])
    }

    /// Independent stream for `seed` identified by `tags` (e.g. step, prompt, sample).
    pub fn tagged(seed: u64, tags: &[u64]) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(fold_tags(tags));
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, unbiased by rejection. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Uniform in `[-scale, scale)`.
    pub fn symmetric(&mut self, scale: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * scale
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k.min(n));
        pool
    }
}
