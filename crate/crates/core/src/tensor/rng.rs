//! Deterministic counter-based random numbers.
//!
//! Output `i` of a stream with key `k` is `mix(k + (i + 1) * GAMMA)` using
//! wrapping 64-bit arithmetic, where
//!
//! ```text
//! GAMMA = 0x9E37_79B9_7F4A_7C15
//! mix(z): z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//!         z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//!         z ^ (z >> 31)
//! ```
//!
//! This is the SplitMix64 finalizer driven by an explicit counter, so any
//! element of a stream can be computed without the ones before it, and ports
//! to other languages only need the three constants above.
//!
//! Derived values:
//! - `uniform()`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! - `below(n)`: `(next_u64() as u128 * n) >> 64`.
//! - `normal()`: Box-Muller on two uniforms `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`.
//! - `split(id)`: a new stream with key `mix(key ^ mix(id + GAMMA))`,
//!   counter 0. The parent stream is not advanced.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: seed,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.key
    }

    /// Independent child stream identified by `id`.
    pub fn split(&self, id: u64) -> Rng {
        Rng::new(mix(self.key ^ mix(id.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
