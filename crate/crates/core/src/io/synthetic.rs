use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::RawTable;
use crate::error::{invalid, Result};

pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// `y = sin(x)/x + ε` with `x ~ U[−5, 5]` and `ε ~ N(0, noise_sd²)`.
pub fn sinc_demo(n: usize, noise_sd: f64, seed: u64) -> Result<RawTable> {
    if n == 0 {
        return invalid("at least one row is required");
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| crate::QsgpError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..=5.0)).collect();
    let y = x.iter().map(|&v| sinc(v) + noise.sample(&mut rng)).collect();
    RawTable::new(DMatrix::from_vec(n, 1, x), y)
}

/// Two isotropic 2-D Gaussian blobs with unit spread centred at `(±2, ±2)`;
/// labels are `1` and `0`, alternating by row.
pub fn two_blobs(n: usize, seed: u64) -> Result<RawTable> {
    if n < 2 {
        return invalid("two blobs need at least two rows");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 0;
        let c = if positive { 2.0 } else { -2.0 };
        x[(i, 0)] = c + sd.sample(&mut rng);
        x[(i, 1)] = c + sd.sample(&mut rng);
        y.push(if positive { 1.0 } else { 0.0 });
    }
    RawTable::new(x, y)
}
