//! Seeded randomness with a fixed, portable derivation.
//!
//! Every random quantity in the crate is drawn from a SplitMix64 stream and
//! converted with the explicit rules below, so a port in another language
//! that implements SplitMix64 reproduces the same draws.
//!
//! * uniform `f64` in `[0, 1)`: top 53 bits of the next word times 2^-53
//! * uniform integer in `0..n`: `floor(uniform * n)`
//! * standard normal: Box-Muller on two uniforms, cosine branch only

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Deterministic random stream.
#[derive(Debug, Clone)]
pub struct DetRng {
    inner: SplitMix64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `seed` and a domain label.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut mixer = SplitMix64::seed_from_u64(stream);
        Self::new(seed ^ mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let v = (self.uniform() * n as f64) as u64;
        v.min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
