//! Gauss–Hermite rules for expectations under a standard normal.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights such that `Σ w_k f(z_k) ≈ E_{z~N(0,1)}[f(z)]`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Rule with `points` nodes, exact for polynomials up to degree `2·points − 1`.
    pub fn new(points: usize) -> Self {
        assert!(points >= 1, "quadrature needs at least one node");
        let (x, w) = physicists_rule(points);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        Self {
            nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|v| v / sqrt_pi).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.iter().map(|(z, w)| w * f(z)).sum()
    }
}

/// Shared, lazily built rule for a given node count.
pub fn gauss_hermite(points: usize) -> Arc<GaussHermite> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(points)
        .or_insert_with(|| Arc::new(GaussHermite::new(points)))
        .clone()
}

// Newton iteration on orthonormal Hermite polynomials (weight e^{-x²}),
// with the usual asymptotic starting guesses for the largest roots.
fn physicists_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let half = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..half {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_are_exact() {
        for &n in &[1usize, 2, 3, 5, 20, 101] {
            let gh = GaussHermite::new(n);
            assert!((gh.expect(|_| 1.0) - 1.0).abs() < 1e-12, "n={n}");
            assert!(gh.expect(|z| z).abs() < 1e-12);
            if n >= 2 {
                assert!((gh.expect(|z| z * z) - 1.0).abs() < 1e-12, "n={n}");
            }
            if n >= 3 {
                assert!((gh.expect(|z| z.powi(4)) - 3.0).abs() < 1e-11, "n={n}");
            }
        }
    }

    #[test]
    fn smooth_expectation() {
        // E[cos z] = e^{-1/2}
        let gh = gauss_hermite(101);
        assert!((gh.expect(f64::cos) - (-0.5f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn single_node_is_origin() {
        let gh = GaussHermite::new(1);
        assert_eq!(gh.nodes(), &[0.0]);
        assert!((gh.weights()[0] - 1.0).abs() < 1e-14);
    }
}
