//! Stochastic training of the variational state and hyperparameters.

mod adaptive;
mod rvm;
mod trainer;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use adaptive::{AdaGrad, Adam, Coord, RatePenalties, SparseAdam};
pub use rvm::{log_precision_gradient, rvm_prune, PrunedModel, RvmState, DEFAULT_PRUNE_THRESHOLD};
pub use trainer::{train, MetricsRow, TrainOutcome, Trainer};

pub use crate::state::VariationalState;

use crate::elbo::{Likelihood, DEFAULT_QUAD_POINTS};
use crate::error::{invalid, Result};
use crate::estimators::RngKey;
use crate::features::BasisExpansion;
use nalgebra::DMatrix;

const INIT_DOMAIN: u64 = 0x1417;

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decay {
    Constant,
    /// The rate falls by `total` over the configured number of iterations.
    Exponential { total: f64 },
}

impl Decay {
    pub fn factor(&self, t: u64, iterations: u64) -> f64 {
        match *self {
            Decay::Constant => 1.0,
            Decay::Exponential { total } => {
                if iterations == 0 {
                    1.0
                } else {
                    total.powf(-(t as f64) / iterations as f64)
                }
            }
        }
    }
}

/// How the gradient with respect to per-basis log precisions is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionGradient {
    /// Straight from the mini-batch ELBO estimate.
    Estimator,
    /// `½(s_i(μ_i² + Σ_ii) − 1)` evaluated exactly for each basis drawn in `ĩ`.
    /// Same mean as the estimator but without its `O(1)` noise, which
    /// otherwise swamps the `1/s_i` decay of the true gradient.
    SampledExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub m_tilde: usize,
    pub n_tilde: usize,
    /// Control-variate support size; 0 disables.
    pub n_bar: usize,
    pub chevron_k: usize,
    pub iterations: u64,
    pub lr_variational: f64,
    pub lr_hyper: f64,
    /// Rate for per-basis log precisions of the relevance vector machine.
    pub lr_precision: f64,
    pub precision_gradient: PrecisionGradient,
    pub decay: Decay,
    /// `None` freezes for the first tenth of training.
    pub hyper_freeze_iters: Option<u64>,
    pub likelihood: Likelihood,
    /// Gauss–Hermite nodes; 0 draws a single `z` per batch instead.
    pub quad_points: usize,
    pub seed: u64,
    pub log_every: u64,
    /// Enumerate every index instead of sampling (requires `m̃ = m`, `ñ = n`).
    pub full_batch: bool,
    /// Refresh the diagonal tail in closed form every this many steps; 0 disables.
    pub diag_refresh: u64,
    /// Add the linear-term control variate (costs one `O(nm)` pass up front).
    pub linear_cv: bool,
    /// Rows used to estimate `φ_rᵀφ_r` at initialization.
    pub init_rows: usize,
    pub adagrad_eps: f64,
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m_tilde: 10_000,
            n_tilde: 500,
            n_bar: 500,
            chevron_k: 10,
            iterations: 10_000,
            lr_variational: 0.1,
            lr_hyper: 1e-5,
            lr_precision: 0.05,
            precision_gradient: PrecisionGradient::SampledExact,
            decay: Decay::Exponential { total: 100.0 },
            hyper_freeze_iters: None,
            likelihood: Likelihood::Gaussian,
            quad_points: DEFAULT_QUAD_POINTS,
            seed: 0,
            log_every: 100,
            full_batch: false,
            diag_refresh: 0,
            linear_cv: false,
            init_rows: 64,
            adagrad_eps: 1e-8,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn freeze_iters(&self) -> u64 {
        self.hyper_freeze_iters.unwrap_or(self.iterations / 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_tilde == 0 || self.n_tilde == 0 {
            return invalid("mini-batch sizes must be positive");
        }
        if self.log_every == 0 {
            return invalid("log interval must be positive");
        }
        if self.init_rows == 0 {
            return invalid("initialization rows must be positive");
        }
        if self.freeze_iters() > self.iterations {
            return invalid("hyperparameter freeze cannot exceed the iteration count");
        }
        for (name, v) in [
            ("variational learning rate", self.lr_variational),
            ("hyperparameter learning rate", self.lr_hyper),
            ("precision learning rate", self.lr_precision),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.adagrad_eps.is_finite() && self.adagrad_eps > 0.0) {
            return invalid("AdaGrad epsilon must be positive");
        }
        if let Decay::Exponential { total } = self.decay {
            if !(total.is_finite() && total > 0.0) {
                return invalid("decay factor must be positive");
            }
        }
        Ok(())
    }

    /// Checks the configuration against a problem of `n` rows and `m` bases.
    pub fn validate_for(&self, n: usize, m: usize) -> Result<()> {
        self.validate()?;
        if self.m_tilde > m || self.n_tilde > n {
            return invalid(format!(
                "mini-batch ({}, {}) exceeds the problem size (m = {m}, n = {n})",
                self.m_tilde, self.n_tilde
            ));
        }
        if self.chevron_k > m {
            return invalid("chevron width cannot exceed the basis count");
        }
        if self.n_bar > n {
            return invalid("control-variate support cannot exceed the row count");
        }
        if self.full_batch && (self.m_tilde != m || self.n_tilde != n) {
            return invalid("full-batch mode requires m̃ = m and ñ = n");
        }
        Ok(())
    }
}

/// Per-column optimum of `(φ_rᵀφ_r/σ² + s_rr)c² − 2 log c`:
/// `c_rr = √(σ²/(φ_rᵀφ_r + σ²s_rr))`.
pub fn closed_form_crr(phi_sq_norm: f64, noise_variance: f64, s_rr: f64) -> Result<f64> {
    if !(phi_sq_norm.is_finite() && phi_sq_norm >= 0.0) {
        return invalid("squared feature norm must be finite and non-negative");
    }
    if !(noise_variance.is_finite() && noise_variance > 0.0) {
        return invalid("noise variance must be positive");
    }
    if !s_rr.is_finite() || s_rr < 0.0 || (s_rr == 0.0 && phi_sq_norm == 0.0) {
        return invalid("the column objective has no minimizer for this precision");
    }
    Ok((noise_variance / (phi_sq_norm + noise_variance * s_rr)).sqrt())
}

/// Gaussian-equivalent noise used to scale the closed-form diagonal for
/// non-Gaussian sites: `2b²` for Laplace, `4` (the inverse of the largest
/// curvature of `log σ(·)`) for logistic.
pub fn effective_noise(likelihood: Likelihood, expansion: &BasisExpansion) -> f64 {
    let h = expansion.hyper();
    match likelihood {
        Likelihood::Gaussian => h.noise_variance(),
        Likelihood::Laplace => 2.0 * h.laplace_scale().powi(2),
        Likelihood::Logistic => 4.0,
    }
}

/// `φ_rᵀφ_r` for every basis, estimated from `min(n, rows)` distinct rows
/// scaled by `n/ñ_init` (exact when every row is used).
pub fn column_sq_norms(expansion: &BasisExpansion, x: &DMatrix<f64>, rows: usize, seed: u64) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n == 0 {
        return invalid("data must have at least one row");
    }
    let take = rows.min(n);
    let mut idx: Vec<usize> = if take == n {
        (0..n).collect()
    } else {
        sample(&mut RngKey::new(seed, 0).rng(INIT_DOMAIN), n, take).into_vec()
    };
    idx.sort_unstable();
    let scale = n as f64 / take as f64;
    let m = expansion.m();
    let mut out = Vec::with_capacity(m);
    let all: Vec<usize> = (0..m).collect();
    for chunk in all.chunks(1024) {
        let blk = expansion.feature_block(&idx, x, chunk)?;
        out.extend(blk.column_iter().map(|c| scale * c.norm_squared()));
    }
    Ok(out)
}

/// `μ = 0`, zero off-diagonals, and every diagonal at its closed-form optimum.
pub fn init_state(expansion: &BasisExpansion, x: &DMatrix<f64>, config: &TrainConfig) -> Result<VariationalState> {
    let m = expansion.m();
    let mut state = VariationalState::new(m, config.chevron_k)?;
    let norms = column_sq_norms(expansion, x, config.init_rows, config.seed)?;
    let s2 = effective_noise(config.likelihood, expansion);
    for (r, &phi2) in norms.iter().enumerate() {
        let c = closed_form_crr(phi2, s2, expansion.precision_diag(r))?;
        state.set_log_c_diag(r, c.ln());
    }
    Ok(state)
}
