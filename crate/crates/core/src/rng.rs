//! Seeded random streams.
//!
//! All randomness in the crate flows through [`GaussianStream`] so that the
//! draws can be reproduced outside Rust:
//!
//! - generator: ChaCha20 (RFC 7539 block function, 20 rounds), key = the
//!   64-bit seed as 8 little-endian bytes followed by 24 zero bytes, stream 0,
//!   counter starting at 0; 64-bit outputs are two consecutive 32-bit words,
//!   low word first;
//! - uniform: `u = ((x >> 11) + 0.5) * 2^-53`, strictly inside (0, 1);
//! - normal: Box-Muller on consecutive uniforms `(u1, u2)`, emitting
//!   `sqrt(-2 ln u1) cos(2 pi u2)` then `sqrt(-2 ln u1) sin(2 pi u2)`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Self {
            rng: ChaCha20Rng::from_seed(key),
            spare: None,
        }
    }

    pub fn next_uniform(&mut self) -> f64 {
        let x = self.rng.next_u64();
        ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        ((self.next_uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = GaussianStream::new(42);
        let mut b = GaussianStream::new(42);
        assert_eq!(a.normals(100), b.normals(100));
        let mut c = GaussianStream::new(43);
        assert_ne!(a.normals(10), c.normals(10));
    }

    #[test]
    fn normal_moments() {
        let mut g = GaussianStream::new(7);
        let n = 200_000;
        let xs = g.normals(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn uniforms_stay_open() {
        let mut g = GaussianStream::new(0);
        for _ in 0..10_000 {
            let u = g.next_uniform();
            assert!(u > 0.0 && u < 1.0);
        }
        for _ in 0..1000 {
            assert!(g.next_below(3) < 3);
        }
    }
}
