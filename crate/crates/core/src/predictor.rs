//! Predictive posterior and held-out metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::elbo::site::softplus;
use crate::elbo::{gauss_hermite, Likelihood};
use crate::error::{invalid, QsgpError, Result};
use crate::features::{se_ard_kernel, BasisExpansion, BasisKind, Hyperparameters};
use crate::state::VariationalState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub mean: f64,
    pub variance: f64,
    /// Variance with one extra basis function centred on the test point.
    pub augmented_variance: Option<f64>,
}

fn check_point(expansion: &BasisExpansion, state: &VariationalState, x: &[f64]) -> Result<()> {
    if x.len() != expansion.hyper().dim() {
        return invalid(format!(
            "test point has {} inputs, the model expects {}",
            x.len(),
            expansion.hyper().dim()
        ));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return invalid("test point must be finite");
    }
    if state.m() != expansion.m() {
        return invalid("state and expansion disagree on the basis count");
    }
    if !expansion.evaluates_new_inputs() {
        return Err(QsgpError::Unsupported(
            "a matrix-backed dictionary cannot be evaluated at new inputs".into(),
        ));
    }
    Ok(())
}

/// Mean `φ(x*)ᵀμ` and variance `‖Cᵀφ(x*)‖²`, plus `σ²` when `include_noise`.
pub fn predict(
    state: &VariationalState,
    expansion: &BasisExpansion,
    x: &[f64],
    include_noise: bool,
) -> Result<PredictiveResult> {
    check_point(expansion, state, x)?;
    let phi = expansion.features_all(x)?;
    let mean = phi.iter().zip(state.mu()).map(|(a, b)| a * b).sum();
    let ct = state.c_transpose_times(&phi)?;
    let mut variance: f64 = ct.iter().map(|v| v * v).sum();
    if include_noise {
        variance += expansion.hyper().noise_variance();
    }
    Ok(PredictiveResult {
        mean,
        variance,
        augmented_variance: None,
    })
}

/// [`predict`] with the test-point augmentation for inducing-point models:
///
/// `V = k(x*)ᵀΣk(x*) + σ²k(x*,x*)² / (kₓᵀkₓ + σ²k(x*,x*))`
///
/// where `k(x*)` are the features at the inducing inputs and `kₓ = k(X_train, x*)`.
/// The second term is added on top of the plain variance.
pub fn predict_augmented(
    state: &VariationalState,
    expansion: &BasisExpansion,
    x_train: &DMatrix<f64>,
    x: &[f64],
    noise_variance: f64,
    include_noise: bool,
) -> Result<PredictiveResult> {
    if expansion.kind() != BasisKind::InducingPoint {
        return Err(QsgpError::Unsupported(
            "augmentation is only defined for inducing-point expansions".into(),
        ));
    }
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return invalid("noise variance must be positive");
    }
    if x_train.ncols() != x.len() {
        return invalid("training inputs and test point differ in dimension");
    }
    let mut out = predict(state, expansion, x, include_noise)?;
    let hyper = expansion.hyper();
    let kss = se_ard_kernel(x, x, hyper)?;
    let mut kk = 0.0;
    let mut row = vec![0.0; x.len()];
    for i in 0..x_train.nrows() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = x_train[(i, d)];
        }
        kk += se_ard_kernel(&row, x, hyper)?.powi(2);
    }
    let extra = noise_variance * kss * kss / (kk + noise_variance * kss);
    out.augmented_variance = Some(out.variance + extra);
    Ok(out)
}

/// Predictions for every row of `x`.
pub fn predict_rows(
    state: &VariationalState,
    expansion: &BasisExpansion,
    x: &DMatrix<f64>,
    include_noise: bool,
    augment_with: Option<&DMatrix<f64>>,
) -> Result<Vec<PredictiveResult>> {
    let mut point = vec![0.0; x.ncols()];
    (0..x.nrows())
        .map(|i| {
            for (d, v) in point.iter_mut().enumerate() {
                *v = x[(i, d)];
            }
            match augment_with {
                Some(train) => predict_augmented(
                    state,
                    expansion,
                    train,
                    &point,
                    expansion.hyper().noise_variance(),
                    include_noise,
                ),
                None => predict(state, expansion, &point, include_noise),
            }
        })
        .collect()
}

/// `P(y = +1)` for a latent `f ~ N(mean, variance)` under the logistic link.
pub fn logistic_probability(p: &PredictiveResult, quad_points: usize) -> f64 {
    let sd = p.variance.max(0.0).sqrt();
    let gh = gauss_hermite(quad_points.max(1));
    // log σ(t) = −softplus(−t), averaged in probability space
    let prob = gh.expect(|z| (-softplus(-(p.mean + sd * z))).exp());
    prob.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub rmse: Option<f64>,
    pub mnlp: f64,
    pub accuracy: Option<f64>,
}

/// RMSE and MNLP for regression, accuracy and MNLP for classification.
///
/// Predictions are on the latent scale; the response density adds the
/// observation noise (`σ²` for Gaussian sites, a Laplace kernel of scale `b`
/// integrated by quadrature). Classification targets are `±1` and accuracy
/// uses the sign of the latent mean, which is the median of the predictive
/// class probability.
pub fn evaluate(
    predictions: &[PredictiveResult],
    targets: &[f64],
    likelihood: Likelihood,
    hyper: &Hyperparameters,
    quad_points: usize,
) -> Result<EvalMetrics> {
    if predictions.is_empty() {
        return invalid("nothing to evaluate");
    }
    if predictions.len() != targets.len() {
        return invalid("predictions and targets must be aligned");
    }
    if predictions.iter().any(|p| !(p.mean.is_finite() && p.variance.is_finite() && p.variance >= 0.0)) {
        return invalid("predictions must be finite with non-negative variance");
    }
    let n = predictions.len();
    let nf = n as f64;
    match likelihood {
        Likelihood::Gaussian | Likelihood::Laplace => {
            let sq: f64 = predictions.iter().zip(targets).map(|(p, y)| (p.mean - y).powi(2)).sum();
            let nll: f64 = predictions
                .iter()
                .zip(targets)
                .map(|(p, &y)| -regression_log_density(p, y, likelihood, hyper, quad_points))
                .sum();
            Ok(EvalMetrics {
                n,
                rmse: Some((sq / nf).sqrt()),
                mnlp: nll / nf,
                accuracy: None,
            })
        }
        Likelihood::Logistic => {
            if targets.iter().any(|&y| y != 1.0 && y != -1.0) {
                return invalid("classification targets must be ±1");
            }
            let mut hits = 0usize;
            let mut nll = 0.0;
            for (p, &y) in predictions.iter().zip(targets) {
                let predicted = if p.mean >= 0.0 { 1.0 } else { -1.0 };
                hits += usize::from(predicted == y);
                let prob = logistic_probability(p, quad_points);
                nll -= if y > 0.0 { prob.ln() } else { (1.0 - prob).ln() };
            }
            Ok(EvalMetrics {
                n,
                rmse: None,
                mnlp: nll / nf,
                accuracy: Some(hits as f64 / nf),
            })
        }
    }
}

fn regression_log_density(
    p: &PredictiveResult,
    y: f64,
    likelihood: Likelihood,
    hyper: &Hyperparameters,
    quad_points: usize,
) -> f64 {
    match likelihood {
        Likelihood::Gaussian => {
            let v = p.variance + hyper.noise_variance();
            -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * (y - p.mean).powi(2) / v
        }
        _ => {
            let b = hyper.laplace_scale();
            let sd = p.variance.sqrt();
            let gh = gauss_hermite(quad_points.max(1));
            // log-sum-exp over nodes keeps tails finite
            let terms: Vec<f64> = gh
                .iter()
                .map(|(z, w)| w.ln() - (2.0 * b).ln() - (y - p.mean - sd * z).abs() / b)
                .collect();
            let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
        }
    }
}
