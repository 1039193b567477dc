//! Per-coordinate adaptive step rules.

use std::collections::BTreeMap;

/// Coordinates addressed by the optimizer, used for step bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Coord {
    Mu(usize),
    /// Factor entry `(i, r)`; the diagonal is updated in log space.
    C(usize, usize),
    Hyper(usize),
    LogPrecision(usize),
}

/// AdaGrad accumulator over a flat block of coordinates.
#[derive(Debug, Clone)]
pub struct AdaGrad {
    acc: Vec<f64>,
    eps: f64,
}

impl AdaGrad {
    pub fn new(len: usize, eps: f64) -> Self {
        Self {
            acc: vec![0.0; len],
            eps,
        }
    }

    /// Accumulates `g²` at `idx` and returns the step `lr·g/(√acc + ε)`.
    pub fn step(&mut self, idx: usize, g: f64, lr: f64) -> f64 {
        self.acc[idx] += g * g;
        lr * g / (self.acc[idx].sqrt() + self.eps)
    }

    pub fn accumulator(&self, idx: usize) -> f64 {
        self.acc[idx]
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }
}

/// Adam over a small dense vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected steps for every coordinate; `lr[k]` is the rate of coordinate `k`.
    pub fn steps(&mut self, grad: &[f64], lr: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(k, &g)| {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                lr[k] * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

/// Adam with per-coordinate step counters, updated only where a gradient is
/// present. Suited to sparse, slowly decaying gradients such as those of
/// log precisions.
#[derive(Debug, Clone)]
pub struct SparseAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<i32>,
}

impl SparseAdam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    pub fn step(&mut self, idx: usize, g: f64, lr: f64) -> f64 {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t[idx] += 1;
        self.m[idx] = B1 * self.m[idx] + (1.0 - B1) * g;
        self.v[idx] = B2 * self.v[idx] + (1.0 - B2) * g * g;
        let mh = self.m[idx] / (1.0 - B1.powi(self.t[idx]));
        let vh = self.v[idx] / (1.0 - B2.powi(self.t[idx]));
        lr * mh / (vh.sqrt() + 1e-8)
    }
}

/// Multiplicative rate penalties for coordinates that produced non-finite gradients.
#[derive(Debug, Clone, Default)]
pub struct RatePenalties {
    scale: BTreeMap<Coord, f64>,
}

impl RatePenalties {
    pub fn factor(&self, c: Coord) -> f64 {
        self.scale.get(&c).copied().unwrap_or(1.0)
    }

    pub fn halve(&mut self, c: Coord) {
        *self.scale.entry(c).or_insert(1.0) *= 0.5;
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adagrad_step_is_signed_rate() {
        let mut a = AdaGrad::new(2, 0.0);
        assert!((a.step(1, -3.0, 0.1) + 0.1).abs() < 1e-15);
        assert_eq!(a.accumulator(1), 9.0);
        assert!((a.step(1, 4.0, 0.1) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_is_close_to_rate() {
        let mut a = Adam::new(2);
        let s = a.steps(&[2.0, -0.5], &[1e-3, 1e-3]);
        assert!((s[0] - 1e-3).abs() < 1e-9);
        assert!((s[1] + 1e-3).abs() < 1e-9);
        assert_eq!(a.steps(&[0.0, 0.0], &[1e-3, 1e-3]).len(), 2);
    }

    #[test]
    fn penalties_compound() {
        let mut p = RatePenalties::default();
        p.halve(Coord::Mu(3));
        p.halve(Coord::Mu(3));
        assert_eq!(p.factor(Coord::Mu(3)), 0.25);
        assert_eq!(p.factor(Coord::Mu(2)), 1.0);
    }
}
