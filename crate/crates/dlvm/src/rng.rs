//! Seeded random number streams.
//!
//! All stochastic code in the crate draws from [`RngStream`], a thin wrapper
//! around the counter-based ChaCha8 generator. The generator, the uniform
//! mapping (53-bit mantissa) and the Box-Muller normal transform are all
//! pinned here so that every sampler in the crate is bit-reproducible given a
//! seed, on any platform.
//!
//! Parallel fan-out uses [`RngStream::fork`]: each unit of work (chain,
//! restart, Monte Carlo draw) gets its own stream derived from the parent key
//! and a caller-chosen index, so results do not depend on scheduling or chunk
//! sizes.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// A seeded, forkable random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: [u8; 32],
    stream: u64,
    rng: ChaCha8Rng,
    cached_normal: Option<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    /// Root stream for a run.
    pub fn seed(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Self::from_key(key, 0)
    }

    fn from_key(key: [u8; 32], stream: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        RngStream {
            key,
            stream,
            rng,
            cached_normal: None,
        }
    }

    /// Derives an independent child stream. Deterministic in
    /// `(parent key, parent stream, idx)` and independent of how much the
    /// parent has already been consumed, so forks may happen before a
    /// parallel dispatch.
    pub fn fork(&self, idx: u64) -> Self {
        let child = splitmix(self.stream ^ idx.wrapping_mul(GOLDEN));
        Self::from_key(self.key, child)
    }

    /// Uniform draw in `[0, 1)` with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]`; used where a log is taken.
    fn uniform_open(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal deviate via the Box-Muller transform. The second
    /// variate of each pair is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // rejection sampling to avoid modulo bias
        let zone = u64::MAX - (u64::MAX % n as u64);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n as u64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Draws `k` distinct indices from `0..n` without replacement.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
