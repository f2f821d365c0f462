//! Seeded randomness helpers. All stochastic behavior in the crate goes
//! through a ChaCha stream so runs are reproducible from a u64 seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Matrix, VolumeTensor};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

pub fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).unwrap().sample(rng)
}

pub fn random_matrix<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(uniform(rng, -1.0, 1.0)))
        .collect();
    Matrix { rows, cols, data }
}

pub fn random_volume<T: Scalar>(
    rng: &mut ChaCha8Rng,
    channels: usize,
    dims: [usize; 3],
) -> VolumeTensor<T> {
    let n = channels * dims[0] * dims[1] * dims[2];
    let data = (0..n).map(|_| T::lit(uniform(rng, -1.0, 1.0))).collect();
    VolumeTensor {
        channels,
        dims,
        data,
    }
}

/// He-style init for conv/linear weights: N(0, sqrt(2/fan_in)).
pub fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::lit(normal(rng, 0.0, std))).collect()
}

/// Xavier-uniform init: U(-a, a), a = sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::lit(uniform(rng, -a, a))).collect()
}
