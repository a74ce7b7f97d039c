//! Counter-based deterministic RNG.
//!
//! Every stochastic consumer in this crate draws from a keyed counter stream:
//! the stream key is a hash of (seed, logical coordinates such as pixel index
//! and sample index), and successive draws advance a counter through a
//! SplitMix64 finalizer. Streams are therefore independent of evaluation
//! order and thread schedule — rendering pixel (x, y) sample s produces the
//! same numbers whether it runs first, last, or on another thread.

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;

/// SplitMix64 finalizer: a bijective 64-bit mix with good avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a running hash with one more word. Order-sensitive.
#[inline]
pub fn hash_combine(h: u64, v: u64) -> u64 {
    mix64(h ^ v.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Hashes a word sequence into a stream key.
pub fn hash_words(words: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3; // arbitrary non-zero basis
    for &w in words {
        h = hash_combine(h, w);
    }
    h
}

/// Keyed counter stream. `Copy`-cheap; create one per logical unit of work.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
}

impl CounterRng {
    /// Stream for a bare seed.
    pub fn new(seed: u64) -> Self {
        Self::keyed(&[seed])
    }

    /// Stream keyed by a word tuple, e.g. `[seed, pixel_index, sample]`.
    pub fn keyed(words: &[u64]) -> Self {
        CounterRng {
            key: hash_words(words),
            ctr: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key.wrapping_add(self.ctr.wrapping_mul(0xd1b5_4a32_d192_ed03)));
        self.ctr = self.ctr.wrapping_add(1);
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller (uses one pair of draws per call).
    pub fn next_normal(&mut self) -> f64 {
        // Guard u1 away from 0 so ln stays finite.
        let u1 = (self.next_u64() >> 11).max(1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
    }

    /// Uniform direction on the unit sphere.
    pub fn next_unit_dir(&mut self) -> [f64; 3] {
        let z = self.next_range(-1.0, 1.0);
        let phi = self.next_range(0.0, core::f64::consts::TAU);
        let r = (1.0 - z * z).max(0.0).sqrt();
        [r * phi.cos(), r * phi.sin(), z]
    }
}
