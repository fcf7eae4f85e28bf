//! Deterministic random streams.
//!
//! Every consumer (initialization, augmentation, sampling, probing) draws from
//! its own stream derived from a master seed plus a tag and an index path, so
//! the values a consumer sees never depend on how many numbers another
//! consumer drew first.
//!
//! The generator is xoshiro256++ seeded through SplitMix64. Uniform `f32`s use
//! the top 24 bits of a 32-bit draw; Gaussians use the Box–Muller transform on
//! two uniform `f64`s.

use num_traits::Float;
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Stream tags. Values are part of the reproducibility contract.
pub mod tag {
    pub const INIT: u64 = 0x1;
    pub const AUGMENT: u64 = 0x2;
    pub const SAMPLING: u64 = 0x3;
    pub const DATA: u64 = 0x4;
    pub const PROBE: u64 = 0x5;
    pub const QUEUE: u64 = 0x6;
    pub const VERIFY: u64 = 0x7;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a tag and an index path into a stream seed.
pub fn derive_seed(master: u64, tag: u64, path: &[u64]) -> u64 {
    let mut state = master ^ tag.rotate_left(32);
    let mut out = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        out ^= splitmix64(&mut state);
        out = out.rotate_left(17);
    }
    out
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn stream(master: u64, tag: u64, path: &[u64]) -> Self {
        Self::seed_from_u64(derive_seed(master, tag, path))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform_f32(&mut self) -> f32 {
        ((self.inner.next_u32() >> 8) as f32) * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform_f64(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn range_usize(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(hi > lo);
        lo + (self.next_u64() % (hi - lo) as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Standard normal via Box–Muller; the second variate of each pair is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let mut u1 = self.uniform_f64();
        while u1 <= f64::MIN_POSITIVE {
            u1 = self.uniform_f64();
        }
        let u2 = self.uniform_f64();
        let r = Float::sqrt(-2.0 * Float::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * Float::sin(theta));
        r * Float::cos(theta)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range_usize(0, i + 1);
            items.swap(i, j);
        }
    }
}
