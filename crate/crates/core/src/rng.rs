//! Seedable, portable random source.
//!
//! All randomized steps (dataset splits, k-means++ seeding, fixtures) draw from
//! [`XorShiftRng`] (Marsaglia xorshift128, as implemented by `rand_xorshift`)
//! seeded with `SeedableRng::seed_from_u64`, which expands the `u64` seed with
//! PCG32. Index sampling uses the multiply-shift reduction
//! `(next_u64() * n) >> 64` on 128-bit integers and uniform reals use the top
//! 53 bits of `next_u64()`, so results do not depend on `rand`'s internal
//! distribution code.

use rand::{RngCore, SeedableRng};
use rand_xorshift::XorShiftRng;

/// Deterministic generator used across the crate.
#[derive(Debug, Clone)]
pub struct SeededRng(XorShiftRng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(XorShiftRng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform index in `0..n`. `n` must be non-zero.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Uniform real in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// In-place Fisher–Yates shuffle (Durstenfeld, descending index).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub(crate) fn inner_mut(&mut self) -> &mut XorShiftRng {
        &mut self.0
    }
}

/// Derive an independent sub-seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
