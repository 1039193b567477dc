//! Site projections `g_ℓ` for the supported likelihoods.
//!
//! Each likelihood factorizes as `Π_ℓ g_ℓ(φ_{ℓ,:}w)` with a log-concave `g_ℓ`.

use serde::{Deserialize, Serialize};

use crate::error::{check_index, invalid, Result};
use crate::features::Hyperparameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Gaussian,
    Laplace,
    Logistic,
}

impl Likelihood {
    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::Gaussian => "gaussian",
            Likelihood::Laplace => "laplace",
            Likelihood::Logistic => "logistic",
        }
    }

    pub fn is_regression(&self) -> bool {
        !matches!(self, Likelihood::Logistic)
    }
}

impl std::str::FromStr for Likelihood {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Likelihood::Gaussian),
            "laplace" => Ok(Likelihood::Laplace),
            "logistic" => Ok(Likelihood::Logistic),
            other => Err(format!("unknown likelihood '{other}'")),
        }
    }
}

/// Per-row log site functions bound to a target vector.
#[derive(Debug, Clone, Copy)]
pub struct SiteProjection<'a> {
    pub likelihood: Likelihood,
    pub targets: &'a [f64],
    pub noise_variance: f64,
    pub laplace_scale: f64,
}

impl<'a> SiteProjection<'a> {
    pub fn new(likelihood: Likelihood, targets: &'a [f64], hyper: &Hyperparameters) -> Result<Self> {
        Self::with_scales(likelihood, targets, hyper.noise_variance(), hyper.laplace_scale())
    }

    pub fn with_scales(
        likelihood: Likelihood,
        targets: &'a [f64],
        noise_variance: f64,
        laplace_scale: f64,
    ) -> Result<Self> {
        if !(noise_variance > 0.0 && laplace_scale > 0.0) {
            return invalid("site scales must be positive");
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return invalid("targets must be finite");
        }
        if likelihood == Likelihood::Logistic && targets.iter().any(|&t| t != 1.0 && t != -1.0) {
            return invalid("logistic targets must be -1 or +1");
        }
        Ok(Self {
            likelihood,
            targets,
            noise_variance,
            laplace_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `log g_ℓ(u)` with bounds checking.
    pub fn site_log_g(&self, row: usize, u: f64) -> Result<f64> {
        check_index("site row", row, self.targets.len())?;
        Ok(self.log_g(row, u))
    }

    pub(crate) fn log_g(&self, row: usize, u: f64) -> f64 {
        let y = self.targets[row];
        match self.likelihood {
            Likelihood::Gaussian => {
                let s2 = self.noise_variance;
                -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (y - u).powi(2) / (2.0 * s2)
            }
            Likelihood::Laplace => {
                let b = self.laplace_scale;
                -(2.0 * b).ln() - (y - u).abs() / b
            }
            Likelihood::Logistic => -softplus(-y * u),
        }
    }

    /// `d log g_ℓ(u) / du` (a subgradient at the Laplace kink).
    pub(crate) fn dlog_g(&self, row: usize, u: f64) -> f64 {
        let y = self.targets[row];
        match self.likelihood {
            Likelihood::Gaussian => (y - u) / self.noise_variance,
            Likelihood::Laplace => {
                let r = y - u;
                if r > 0.0 {
                    1.0 / self.laplace_scale
                } else if r < 0.0 {
                    -1.0 / self.laplace_scale
                } else {
                    0.0
                }
            }
            Likelihood::Logistic => y * sigmoid(-y * u),
        }
    }

    /// Derivative of `log g_ℓ(u)` with respect to the log of the site scale
    /// (`log σ²` for Gaussian, `log b` for Laplace, zero for logistic).
    pub(crate) fn dlog_g_dlog_scale(&self, row: usize, u: f64) -> f64 {
        let y = self.targets[row];
        match self.likelihood {
            Likelihood::Gaussian => -0.5 + (y - u).powi(2) / (2.0 * self.noise_variance),
            Likelihood::Laplace => -1.0 + (y - u).abs() / self.laplace_scale,
            Likelihood::Logistic => 0.0,
        }
    }
}

/// `log(1 + e^t)` without overflow.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let y = [1.0];
        let s = SiteProjection::with_scales(Likelihood::Logistic, &y, 1.0, 1.0).unwrap();
        assert!((s.site_log_g(0, 0.0).unwrap() + 2f64.ln()).abs() < 1e-15);

        let y = [0.7];
        let s = SiteProjection::with_scales(Likelihood::Laplace, &y, 1.0, 0.5).unwrap();
        assert_eq!(s.site_log_g(0, 0.7).unwrap(), 0.0);

        let s = SiteProjection::with_scales(Likelihood::Gaussian, &y, 1.0, 1.0).unwrap();
        assert!((s.site_log_g(0, 0.7).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn logistic_targets_validated() {
        let y = [1.0, 0.0];
        assert!(SiteProjection::with_scales(Likelihood::Logistic, &y, 1.0, 1.0).is_err());
    }

    #[test]
    fn logistic_is_overflow_safe() {
        let y = [-1.0];
        let s = SiteProjection::with_scales(Likelihood::Logistic, &y, 1.0, 1.0).unwrap();
        assert!((s.log_g(0, 1000.0) + 1000.0).abs() < 1e-9);
        assert!(s.log_g(0, -1000.0).abs() < 1e-300);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let y = [0.4];
        for lik in [Likelihood::Gaussian, Likelihood::Laplace] {
            let s = SiteProjection::with_scales(lik, &y, 0.3, 0.6).unwrap();
            let u = -0.35;
            let h = 1e-6;
            let fd = (s.log_g(0, u + h) - s.log_g(0, u - h)) / (2.0 * h);
            assert!((fd - s.dlog_g(0, u)).abs() < 1e-6);
            let scale = |f: f64| match lik {
                Likelihood::Gaussian => SiteProjection::with_scales(lik, &y, 0.3 * f, 0.6).unwrap(),
                _ => SiteProjection::with_scales(lik, &y, 0.3, 0.6 * f).unwrap(),
            };
            let fd = (scale(h.exp()).log_g(0, u) - scale((-h).exp()).log_g(0, u)) / (2.0 * h);
            assert!((fd - s.dlog_g_dlog_scale(0, u)).abs() < 1e-6);
        }
        let y = [-1.0];
        let s = SiteProjection::with_scales(Likelihood::Logistic, &y, 1.0, 1.0).unwrap();
        let fd = (s.log_g(0, 0.3 + 1e-6) - s.log_g(0, 0.3 - 1e-6)) / 2e-6;
        assert!((fd - s.dlog_g(0, 0.3)).abs() < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn log_sites_are_concave(a in -30.0f64..30.0, b in -30.0f64..30.0, y in -3.0f64..3.0, cls in any::<bool>()) {
            let yr = [y];
            let yc = [if cls { 1.0 } else { -1.0 }];
            let sites = [
                SiteProjection::with_scales(Likelihood::Gaussian, &yr, 0.5, 1.0).unwrap(),
                SiteProjection::with_scales(Likelihood::Laplace, &yr, 1.0, 0.5).unwrap(),
                SiteProjection::with_scales(Likelihood::Logistic, &yc, 1.0, 1.0).unwrap(),
            ];
            for s in sites {
                let mid = s.log_g(0, 0.5 * (a + b));
                let avg = 0.5 * (s.log_g(0, a) + s.log_g(0, b));
                prop_assert!(mid >= avg - 1e-9 * (1.0 + avg.abs()));
            }
        }
    }
}
