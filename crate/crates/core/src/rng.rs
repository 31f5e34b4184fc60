//! Reproducible random streams keyed by `(master_seed, stream_id)`.
//!
//! Backed by ChaCha8, a counter-based generator: the key is derived from the
//! master seed, the stream id selects the ChaCha nonce, and draws advance the
//! block counter. Distinct stream ids give independent sequences without any
//! shared state, so parallel consumers only need distinct ids.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self { master_seed, stream_id, inner }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream under the same master seed, keyed by this stream's id and `tag`.
    ///
    /// Independent of how many draws have been taken from `self`.
    pub fn substream(&self, tag: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5EED)));
        RngStream::new(self.master_seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn million_draws_reproduce() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = RngStream::new(42, 0);
        let mut b = RngStream::new(42, 1);
        let same = (0..1000).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn substream_ignores_parent_position() {
        let a = RngStream::new(3, 9);
        let mut b = RngStream::new(3, 9);
        for _ in 0..17 {
            b.normal();
        }
        let mut sa = a.substream(5);
        let mut sb = b.substream(5);
        assert_eq!(sa.next_u64(), sb.next_u64());
    }

    #[test]
    fn independent_streams_uncorrelated() {
        let mut a = RngStream::new(1, 100);
        let mut b = RngStream::new(1, 101);
        let n = 100_000;
        let corr: f64 = (0..n).map(|_| a.normal() * b.normal()).sum::<f64>() / n as f64;
        // standard error 1/sqrt(n) ~ 0.003
        assert!(corr.abs() < 0.015, "corr {corr}");
    }
}
