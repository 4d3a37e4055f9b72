//! Portable, seedable random streams.
//!
//! All randomness is drawn from ChaCha8 keyed by the 64-bit seed (little-endian
//! in key bytes 0..8, remaining key bytes zero) with a per-purpose stream id.
//! Uniform doubles use the top 53 bits of each 64-bit word; normal variates
//! use the Box-Muller transform; Laplace variates use the inverse CDF. These
//! transforms are fixed so that other implementations can reproduce the same
//! calibration sets bit for bit.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Named sub-streams. New purposes must take a fresh id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Samples = 1,
    Outliers = 2,
    KMeansInit = 3,
    RandomCodebooks = 4,
    BlockSampling = 5,
    Reseed = 6,
    Experiment = 7,
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    #[inline]
    pub fn uniform_open_low(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Integer in `[0, n)` by multiply-shift. `n` must be nonzero.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Pair of independent standard normals (Box-Muller).
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open_low();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Standard Laplace variate (scale 1) by inverse CDF.
    pub fn laplace(&mut self) -> f64 {
        let u = self.uniform() - 0.5;
        let mag = 1.0 - 2.0 * u.abs();
        // u == -0.5 maps to ln(0); nudge to the smallest positive double.
        -u.signum() * mag.max(f64::MIN_POSITIVE).ln()
    }

    /// Sample an index with probability proportional to `weights[i]`.
    /// Returns `None` if the total weight is not positive.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total = crate::sum::sum(weights.iter().copied());
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = None;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                last_positive = Some(i);
                if target < acc {
                    return Some(i);
                }
            }
        }
        last_positive
    }
}

/// Mix two seeds into one (SplitMix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
