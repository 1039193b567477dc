//! Dense reference implementations of the ELBO and the conjugate posterior.
//!
//! Everything here is `O(nm² + m³)` and meant for small instances: it is the
//! yardstick the stochastic estimators are checked against.
//!
//! With `q(w) = N(μ, CCᵀ)` the Gaussian-likelihood ELBO splits as
//! `ELBO = −½ (L_μ + L_Σ + L_const)` where
//!
//! * `L_μ = (−2yᵀΦμ + ‖Φμ‖²)/σ² + μᵀSμ`
//! * `L_Σ = ‖ΦC‖²_F/σ² + tr(SΣ) − log|Σ|`
//! * `L_const = log|2πS⁻¹| − m log 2π − m + n log(2πσ²) + yᵀy/σ²`

pub mod quadrature;
pub mod site;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{invalid, QsgpError, Result};
pub use quadrature::{gauss_hermite, GaussHermite};
pub use site::{Likelihood, SiteProjection};

/// Default number of Gauss–Hermite nodes.
pub const DEFAULT_QUAD_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactElboTerms {
    pub l_mu: f64,
    pub l_sigma: f64,
    pub l_const: f64,
    pub elbo: f64,
}

/// Exact gradients of `L_μ` and `L_Σ`.
#[derive(Debug, Clone)]
pub struct ExactGradients {
    /// `∂L_μ/∂μ`.
    pub l_mu_mu: DVector<f64>,
    /// `∂L_Σ/∂C`, restricted to the lower triangle.
    pub l_sigma_c: DMatrix<f64>,
}

fn check_dims(phi: &DMatrix<f64>, s: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    let m = phi.ncols();
    if s.nrows() != m || s.ncols() != m {
        return invalid("prior precision must be m × m");
    }
    if y.len() != phi.nrows() {
        return invalid("targets must have one entry per feature row");
    }
    Ok(())
}

/// Rejects factors that are not lower triangular with a positive diagonal.
pub fn validate_cholesky_factor(c: &DMatrix<f64>) -> Result<()> {
    if !c.is_square() {
        return Err(QsgpError::InvalidState("covariance factor must be square".into()));
    }
    for i in 0..c.nrows() {
        if !(c[(i, i)] > 0.0) {
            return Err(QsgpError::InvalidState(format!(
                "covariance factor diagonal entry {i} is not positive"
            )));
        }
        for j in i + 1..c.ncols() {
            if c[(i, j)] != 0.0 {
                return Err(QsgpError::InvalidState(
                    "covariance factor must be lower triangular".into(),
                ));
            }
        }
    }
    Ok(())
}

fn log_det_spd(s: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(s.clone())
        .ok_or_else(|| QsgpError::Numeric("prior precision is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// The three braced terms of the closed-form ELBO and their combination.
pub fn exact_elbo(
    phi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
    mu: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<ExactElboTerms> {
    check_dims(phi, s, y)?;
    validate_cholesky_factor(c)?;
    if mu.len() != phi.ncols() || c.nrows() != phi.ncols() {
        return invalid("variational parameters do not match the basis count");
    }
    let n = phi.nrows() as f64;
    let m = phi.ncols() as f64;
    let s2 = noise_variance;
    let two_pi = 2.0 * std::f64::consts::PI;

    let phi_mu = phi * mu;
    let l_mu = (-2.0 * y.dot(&phi_mu) + phi_mu.norm_squared()) / s2 + mu.dot(&(s * mu));

    let phi_c = phi * c;
    let sigma = c * c.transpose();
    let log_det_sigma = 2.0 * c.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let l_sigma = phi_c.norm_squared() / s2 + (s * &sigma).trace() - log_det_sigma;

    // log|2πS⁻¹| − m log 2π = −log|S|
    let l_const = -log_det_spd(s)? - m + n * (two_pi * s2).ln() + y.norm_squared() / s2;

    Ok(ExactElboTerms {
        l_mu,
        l_sigma,
        l_const,
        elbo: -0.5 * (l_mu + l_sigma + l_const),
    })
}

/// Analytic gradients of `L_μ` and `L_Σ` with respect to `μ` and `C`.
pub fn exact_gradients(
    phi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
    mu: &DVector<f64>,
    c: &DMatrix<f64>,
) -> Result<ExactGradients> {
    check_dims(phi, s, y)?;
    validate_cholesky_factor(c)?;
    let s2 = noise_variance;
    let gram = phi.transpose() * phi;
    let l_mu_mu = (&gram * mu * 2.0 - phi.transpose() * y * 2.0) / s2 + s * mu * 2.0;
    let precision = gram / s2 + s;
    let mut l_sigma_c = precision * c * 2.0;
    for i in 0..c.nrows() {
        l_sigma_c[(i, i)] -= 2.0 / c[(i, i)];
        for j in i + 1..c.ncols() {
            l_sigma_c[(i, j)] = 0.0;
        }
    }
    Ok(ExactGradients { l_mu_mu, l_sigma_c })
}

/// Closed-form conjugate posterior `Σ* = (ΦᵀΦ/σ² + S)⁻¹`, `μ* = Σ*Φᵀy/σ²`.
pub fn exact_posterior(
    phi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dims(phi, s, y)?;
    let precision = phi.transpose() * phi / noise_variance + s;
    let chol = Cholesky::new(precision)
        .ok_or_else(|| QsgpError::Numeric("posterior precision is singular".into()))?;
    let mut sigma = chol.inverse();
    sigma = (&sigma + sigma.transpose()) * 0.5;
    let mu = &sigma * (phi.transpose() * y) / noise_variance;
    Ok((mu, sigma))
}

/// `log N(y | 0, ΦS⁻¹Φᵀ + σ²I)`.
pub fn log_marginal_likelihood(
    phi: &DMatrix<f64>,
    s: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
) -> Result<f64> {
    check_dims(phi, s, y)?;
    let n = phi.nrows();
    let s_chol = Cholesky::new(s.clone())
        .ok_or_else(|| QsgpError::Numeric("prior precision is not positive definite".into()))?;
    let cov = phi * s_chol.inverse() * phi.transpose() + DMatrix::identity(n, n) * noise_variance;
    let chol = Cholesky::new(cov)
        .ok_or_else(|| QsgpError::Numeric("marginal covariance is not positive definite".into()))?;
    let alpha = chol.solve(y);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (y.dot(&alpha) + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// `KL(q ‖ p)` for `q = N(μ, CCᵀ)` and `p = N(0, S⁻¹)`.
pub fn exact_kl(s: &DMatrix<f64>, mu: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    validate_cholesky_factor(c)?;
    let m = mu.len() as f64;
    let sigma = c * c.transpose();
    let log_det_sigma = 2.0 * c.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (mu.dot(&(s * mu)) + (s * sigma).trace() - log_det_sigma - log_det_spd(s)? - m))
}

/// How the standard-normal draw scales the projected covariance inside `log g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpreadConvention {
    /// `log g(φμ + z·φΣφᵀ)`, the form the lower-bound estimator is unbiased for.
    #[default]
    Variance,
    /// `log g(φμ + z·√(φΣφᵀ))`, the usual Gaussian reparameterization.
    StdDev,
}

/// One-dimensional expectation `E_z[log g_ℓ(φ_ℓμ + z·φ_ℓΣφ_ℓᵀ)]` by Gauss–Hermite.
pub fn expected_log_lik_1d(
    site: &SiteProjection<'_>,
    row: usize,
    phi_row: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    quad_points: usize,
) -> Result<f64> {
    expected_log_lik_1d_with(site, row, phi_row, mu, sigma, quad_points, SpreadConvention::Variance)
}

pub fn expected_log_lik_1d_with(
    site: &SiteProjection<'_>,
    row: usize,
    phi_row: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    quad_points: usize,
    convention: SpreadConvention,
) -> Result<f64> {
    if quad_points == 0 {
        return invalid("quadrature needs at least one node");
    }
    if phi_row.len() != mu.len() || sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
        return invalid("feature row, mean and covariance dimensions disagree");
    }
    site.site_log_g(row, 0.0)?;
    let mean = phi_row.dot(mu);
    let proj = phi_row.dot(&(sigma * phi_row));
    let spread = match convention {
        SpreadConvention::Variance => proj,
        SpreadConvention::StdDev => proj.max(0.0).sqrt(),
    };
    if spread == 0.0 {
        return Ok(site.log_g(row, mean));
    }
    let gh = gauss_hermite(quad_points);
    Ok(gh.expect(|z| site.log_g(row, mean + z * spread)))
}

/// `Σ_ℓ E_z[log g_ℓ(φ_ℓμ + z·φ_ℓΣφ_ℓᵀ)]` over every row of `phi`.
pub fn expected_log_lik(
    site: &SiteProjection<'_>,
    phi: &DMatrix<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    quad_points: usize,
) -> Result<f64> {
    if site.len() != phi.nrows() {
        return invalid("one target per feature row is required");
    }
    let mut total = 0.0;
    for l in 0..phi.nrows() {
        let row = phi.row(l).transpose();
        total += expected_log_lik_1d(site, l, &row, mu, sigma, quad_points)?;
    }
    Ok(total)
}
