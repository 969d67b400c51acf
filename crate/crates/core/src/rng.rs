//! Reproducible parameter streams.
//!
//! Each named stream is a ChaCha8 generator seeded with
//! `splitmix64(seed ^ fnv1a64(name))`. Both mixers are fixed here, so a given
//! `(seed, name)` yields the same values on every platform and run, and adding
//! a new stream never shifts the values of existing ones.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
}

pub type Stream = ChaCha8Rng;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> Stream {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a64(name.as_bytes())))
    }

    /// Independent child generator, e.g. one per sample index.
    pub fn child(&self, name: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ fnv1a64(name.as_bytes())).rotate_left(17))
    }

    /// Uniform values in `[-bound, bound)`.
    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let mut s = self.stream(name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| (s.random::<f64>() * 2.0 - 1.0) * bound).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let mut s = self.stream(name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut s)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let r = Rng::new(42);
        let a = r.uniform("w", &[8], 1.0);
        let b = Rng::new(42).uniform("w", &[8], 1.0);
        let c = r.uniform("v", &[8], 1.0);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn known_mixer_values() {
        // pinned so accidental changes to the stream derivation are caught
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }
}
