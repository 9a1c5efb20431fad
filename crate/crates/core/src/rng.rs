//! SplitMix64, the single pseudo-random source behind every shuffle and
//! augmentation draw in this crate.
//!
//! The generator is fully specified so partitions and augmented samples are
//! reproducible bit-for-bit on any platform:
//!
//! ```text
//! next():
//!     state = state + 0x9E3779B97F4A7C15            (wrapping)
//!     z = state
//!     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9       (wrapping)
//!     z = (z ^ (z >> 27)) * 0x94D049BB133111EB       (wrapping)
//!     return z ^ (z >> 31)
//! ```
//!
//! Bounded integers use rejection sampling (see [`SplitMix64::below`]) and
//! unit floats take the top 53 bits.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `0..bound`. Draws below `2^64 mod bound` are
    /// rejected so every residue is equally likely.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform float in `[lo, hi]`; returns `lo` exactly when `lo == hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.unit();
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * u
        }
    }

    /// In-place Fisher–Yates shuffle, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Derives a child seed from a parent seed and a list of keys by chaining
/// SplitMix64 outputs.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut acc = SplitMix64::new(seed).next_u64();
    for &k in keys {
        acc = SplitMix64::new(acc ^ k.wrapping_mul(0xD6E8_FEB8_6659_FD93)).next_u64();
    }
    acc
}
