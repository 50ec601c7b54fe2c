//! Portable seeded random numbers.
//!
//! [`SeededRng`] is SplitMix64. Every draw advances a 64-bit counter by the
//! golden-ratio increment and mixes it:
//!
//! ```text
//! state = state + 0x9E3779B97F4A7C15            (wrapping)
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (wrapping)
//! output = z ^ (z >> 31)
//! ```
//!
//! Derived draws are defined on top of `next_u64` so that ports to other
//! languages reproduce identical streams:
//!
//! * `next_f64`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)`: `next_u64 % n`, redrawing while `next_u64 >= 2^64 - (2^64 % n)`.
//! * `normal`: Box-Muller, consuming exactly two `next_f64` draws `a, b` and
//!   returning `sqrt(-2 ln(1 - a)) * cos(2 pi b)`. No value is cached.

use core::f64::consts::PI;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a sub-stream, keyed by `stream`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut mixer = Self::new(self.seed ^ stream.wrapping_mul(GOLDEN_GAMMA));
        Self::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let a = self.next_f64();
        let b = self.next_f64();
        libm::sqrt(-2.0 * libm::log(1.0 - a)) * libm::cos(2.0 * PI * b)
    }

    pub fn gaussian(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.normal()
    }

    pub fn lognormal(&mut self, mu: f64, sigma: f64) -> f64 {
        libm::exp(self.gaussian(mu, sigma))
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
