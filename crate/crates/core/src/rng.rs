//! Seeded, splittable random streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic generator. Identical seeds give identical streams on every
/// platform; [`DeterministicRng::split`] derives an independent child stream.
#[derive(Debug, Clone)]
pub struct DeterministicRng {
    inner: ChaCha8Rng,
}

pub fn new_rng(seed: u64) -> DeterministicRng {
    DeterministicRng {
        inner: ChaCha8Rng::seed_from_u64(seed),
    }
}

impl DeterministicRng {
    /// Child stream seeded from the parent. Advances the parent by one draw.
    pub fn split(&mut self) -> DeterministicRng {
        let mut seed = [0u8; 32];
        self.inner.fill_bytes(&mut seed);
        DeterministicRng {
            inner: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `[lo, hi)`. Panics if the range is empty.
    pub fn index(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}
