//! Reproducible random streams.
//!
//! Uniform bits come from ChaCha8 (a counter-mode stream cipher, identical on
//! every platform for a given seed); normals are produced with the Box-Muller
//! transform so the mapping from bits to samples is fixed as well.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeded generator of uniform and standard-normal samples.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[0, 1)` with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal sample.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Tensor of i.i.d. standard normal samples drawn from `rng`.
pub fn gaussian_like(shape: [usize; 3], rng: &mut SeededRng) -> Result<Tensor> {
    if shape.contains(&0) {
        return Err(Error::invalid(format!("zero-sized shape {shape:?}")));
    }
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.next_normal() as f32).collect();
    Tensor::new(shape, data)
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a master seed and a path of indices.
///
/// Used to give every ball generation its own stream as a pure function of
/// `(master, ev, round, index)`, independent of execution order.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix_finalize(master), |h, &p| {
        splitmix_finalize(h ^ splitmix_finalize(p.wrapping_add(GOLDEN_GAMMA)))
    })
}
