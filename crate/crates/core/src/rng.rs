//! Seeded pseudorandom generator with a pinned algorithm.
//!
//! Reproducibility of synthesized test sets and simulation traces is part of
//! this crate's output contract, so the generator is not allowed to change
//! between versions or platforms. We use SplitMix64, a counter-based mixer
//! with published constants:
//!
//! ```text
//! state   += 0x9E3779B97F4A7C15
//! z        = state
//! z        = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z        = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output   = z ^ (z >> 31)
//! ```
//!
//! Derived conventions, also pinned:
//! - floats in `[0,1)` are `(next_u64() >> 11) * 2^-53`;
//! - bounded integers are `next_u64() % n` (the modulo bias is negligible for
//!   the small ranges used here);
//! - per-key streams are seeded with `next_u64()` of
//!   `SplitMix64::new(seed ^ fnv1a64(key))`, where `fnv1a64` is FNV-1a over
//!   the key's UTF-8 bytes.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform float in `[0, 1)` built from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn next_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        lo + self.next_below(hi - lo + 1)
    }

    pub fn next_bool(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }
}

/// FNV-1a 64-bit hash, used to derive per-key streams from string ids.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive the stream seed for `key` under a dataset-level `seed`.
///
/// Streams derived this way depend only on `(seed, key)`, never on worker
/// identity or iteration order, which is what makes parallel per-image
/// synthesis reproducible.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    SplitMix64::new(seed ^ fnv1a64(key.as_bytes())).next_u64()
}

/// Convenience: the stream itself rather than its seed.
pub fn derive_stream(seed: u64, key: &str) -> SplitMix64 {
    SplitMix64::new(derive_seed(seed, key))
}
