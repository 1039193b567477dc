#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use qsgp_core::features::{BasisExpansion, Hyperparameters};
use qsgp_core::state::VariationalState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub expansion: BasisExpansion,
    pub noise: f64,
}

impl Instance {
    pub fn phi(&self) -> DMatrix<f64> {
        self.expansion.dense_features(&self.x).unwrap()
    }

    pub fn s(&self) -> DMatrix<f64> {
        self.expansion.dense_precision()
    }

    pub fn y_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_x(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
}

pub fn rff_instance(n: usize, m: usize, d: usize, seed: u64) -> Instance {
    let mut r = rng(seed);
    let x = random_x(n, d, &mut r);
    let y = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
    let hyper = Hyperparameters::new(&vec![1.3; d], 1.2, 0.4, 0.8).unwrap();
    Instance {
        x,
        y,
        expansion: BasisExpansion::rff(m, seed + 1000, hyper).unwrap(),
        noise: 0.4,
    }
}

pub fn inducing_instance(n: usize, m: usize, seed: u64) -> Instance {
    let mut r = rng(seed);
    let x = random_x(n, 1, &mut r);
    let y = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
    let centers = random_x(m, 1, &mut r);
    let hyper = Hyperparameters::new(&[0.9], 1.0, 0.3, 1.0).unwrap();
    Instance {
        x,
        y,
        expansion: BasisExpansion::inducing(centers, hyper).unwrap(),
        noise: 0.3,
    }
}

pub fn dictionary_instance(n: usize, seed: u64) -> Instance {
    let mut r = rng(seed);
    let x = random_x(n, 1, &mut r);
    let y = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
    let hyper = Hyperparameters::new(&[0.8], 1.0, 0.25, 1.0).unwrap();
    let s = (0..n).map(|_| r.random_range(0.5..3.0)).collect();
    Instance {
        x: x.clone(),
        y,
        expansion: BasisExpansion::dictionary_from_kernel(x, hyper, s).unwrap(),
        noise: 0.25,
    }
}

/// Random chevron state with `k` dense columns.
pub fn random_state(m: usize, k: usize, seed: u64) -> VariationalState {
    let mut r = rng(seed);
    let mu: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let c = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            r.random_range(0.3..1.2)
        } else if j < k && i > j {
            r.random_range(-0.4..0.4)
        } else {
            0.0
        }
    });
    VariationalState::from_dense(&mu, &c, k).unwrap()
}

/// Running mean and variance (Welford).
#[derive(Default, Clone)]
pub struct Stats {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Stats {
    pub fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n).sqrt()
    }

    /// |mean − target| in standard errors.
    pub fn z(&self, target: f64) -> f64 {
        let se = self.std_error();
        if se == 0.0 {
            if (self.mean - target).abs() <= 1e-10 * (1.0 + target.abs()) {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - target).abs() / se
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
