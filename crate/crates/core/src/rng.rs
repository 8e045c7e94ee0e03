//! Seeded, platform-independent random streams.
//!
//! Backed by ChaCha8, which is counter based: one seed yields 2^64
//! independent streams. Minibatch sampling, weight init, perturbation
//! directions and hidden noise each draw from their own stream so changing
//! one consumer never shifts another.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::{l2_norm, Tensor};
use crate::{Error, Result};

/// Well-known stream ids used by the trainer and CLI.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const LABELED_BATCH: u64 = 2;
    pub const MIXED_BATCH: u64 = 3;
    pub const PERTURB: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const DATA: u64 = 6;
    pub const PROBE: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on a stream derived from this one and `label`.
    /// Does not advance `self`.
    pub fn fork(&self, label: u64) -> Rng {
        Rng::with_stream(self.seed, splitmix(self.stream ^ splitmix(label.wrapping_add(0x9E37))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below needs a positive bound");
        let n = n as u64;
        // rejection sampling keeps the draw unbiased
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn gaussian(&mut self) -> f64 {
        let mut u1 = self.uniform();
        while u1 <= 0.0 {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
    }

    pub fn gaussian_vec(&mut self, n: usize, sd: f64) -> Vec<f64> {
        (0..n).map(|_| sd * self.gaussian()).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Isotropic random direction: iid Gaussian draw scaled to unit L2 norm.
pub fn gaussian_unit_vector(rng: &mut Rng, dim: usize) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::ZeroDimension);
    }
    loop {
        let mut v = rng.gaussian_vec(dim, 1.0);
        let n = l2_norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
            return Ok(Tensor::vector(v));
        }
    }
}

/// Fills each row of a `[rows, dim]` matrix with an independent unit vector.
pub fn gaussian_unit_rows(rng: &mut Rng, rows: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        data.extend(gaussian_unit_vector(rng, dim)?.into_data());
    }
    Tensor::matrix(rows, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::with_stream(42, 3);
        let mut b = Rng::with_stream(42, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::with_stream(42, 4);
        assert_ne!(Rng::with_stream(42, 3).next_u64(), c.next_u64());
    }

    #[test]
    fn fork_does_not_advance_parent() {
        let a = Rng::new(9);
        let mut f1 = a.fork(1);
        let mut f2 = a.fork(1);
        assert_eq!(f1.next_u64(), f2.next_u64());
        assert_ne!(a.fork(1).next_u64(), a.fork(2).next_u64());
    }

    #[test]
    fn unit_vector_edge_cases() {
        let mut rng = Rng::new(1);
        assert_eq!(gaussian_unit_vector(&mut rng, 0), Err(Error::ZeroDimension));
        for _ in 0..20 {
            let d = gaussian_unit_vector(&mut rng, 1).unwrap();
            assert!(d.data()[0] == 1.0 || d.data()[0] == -1.0);
        }
        let d = gaussian_unit_vector(&mut rng, 784).unwrap();
        assert!((d.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_vectors_are_isotropic_in_2d() {
        let mut rng = Rng::new(2024);
        let (mut sx, mut sy) = (0.0, 0.0);
        let n = 10_000;
        for _ in 0..n {
            let d = gaussian_unit_vector(&mut rng, 2).unwrap();
            sx += d.data()[0];
            sy += d.data()[1];
        }
        assert!((sx / n as f64).abs() < 0.05);
        assert!((sy / n as f64).abs() < 0.05);
    }

    #[test]
    fn below_and_shuffle() {
        let mut rng = Rng::new(5);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[rng.below(3)] += 1;
        }
        assert!(counts.iter().all(|&c| c > 850));
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
