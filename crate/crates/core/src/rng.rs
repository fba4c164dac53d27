//! Seeded, platform-independent random numbers.
//!
//! The generator is SplitMix64: a 64-bit counter advanced by the golden-ratio
//! increment `0x9E3779B97F4A7C15`, with each output produced by the finalizer
//!
//! ```text
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Derived quantities are defined on top of that stream so other
//! implementations can reproduce datasets and initializations exactly:
//!
//! - uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! - index below `n`: high 64 bits of `next_u64 * n` (128-bit product)
//! - standard normal: Box–Muller cosine branch, one value per two uniforms,
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`
//! - child streams: `Rng::new(splitmix_mix(state ^ splitmix_mix(tag)))`

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator. The whole state is one `u64`, so it checkpoints trivially.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Restore a generator from a value previously returned by [`Rng::state`].
    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    /// Independent child stream keyed by `tag`. Does not advance `self`.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(mix(self.state ^ mix(tag.wrapping_add(GOLDEN_GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
