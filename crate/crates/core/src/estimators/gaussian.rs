//! Unbiased estimators of `L_μ`, `L_Σ` and `L_const` for the Gaussian likelihood.
//!
//! Scale factors used throughout:
//! `α = 2nm/(σ²ñm̃)`, `β = nm²/(σ²ñm̃²)`, `γ = m²/m̃²`.

use nalgebra::DMatrix;

use super::{column_dot, combine_columns, dot, BatchContext, IndexBatch, StochasticEstimate};
use crate::error::{invalid, QsgpError, Result};
use crate::features::{BasisExpansion, BasisKind};
use crate::state::VariationalState;

/// Pieces of a bilinear term `v_j̃ᵀ M_{j̃,ĩ} v_ĩ` restricted to sparse positions.
struct Bilinear {
    /// `Φ_{ℓ̃,ĩ}v_ĩ` and `Φ_{ℓ̃,j̃}v_j̃`.
    u: Vec<f64>,
    v: Vec<f64>,
    /// `v_j̃ᵀS_{j̃,ĩ}v_ĩ` and its partials per position.
    s_value: f64,
    s_grad_i: Vec<f64>,
    s_grad_j: Vec<f64>,
}

impl BatchContext<'_> {
    fn s_bilinear(&self, pi: &[usize], wi: &[f64], pj: &[usize], wj: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let bt = self.batch;
        match &self.s_ji {
            None => {
                // Diagonal S: only pairs with i_a = j_b contribute, and both
                // sides carry the same parameter value.
                let mut value = 0.0;
                let gi: Vec<f64> = pi
                    .iter()
                    .zip(wi)
                    .map(|(&a, &w)| {
                        let k = bt.i_tilde[a];
                        let s = self.expansion.precision_entry(k, k);
                        let cnt = self.count_j(k) as f64;
                        value += s * w * w * cnt;
                        s * w * cnt
                    })
                    .collect();
                let gj: Vec<f64> = pj
                    .iter()
                    .zip(wj)
                    .map(|(&b, &w)| {
                        let k = bt.j_tilde[b];
                        self.expansion.precision_entry(k, k) * w * self.count_i(k) as f64
                    })
                    .collect();
                (value, gi, gj)
            }
            Some(s) => {
                let mut gi = vec![0.0; pi.len()];
                let mut gj = vec![0.0; pj.len()];
                let mut value = 0.0;
                for (q, &b) in pj.iter().enumerate() {
                    for (p, &a) in pi.iter().enumerate() {
                        let sv = s[(b, a)];
                        gi[p] += sv * wj[q];
                        gj[q] += sv * wi[p];
                    }
                    value += wj[q] * gj[q];
                }
                (value, gi, gj)
            }
        }
    }

    fn bilinear(&self, pi: &[usize], wi: &[f64], pj: &[usize], wj: &[f64], data: bool) -> Bilinear {
        let (u, v) = if data {
            (combine_columns(&self.a, pi, wi), combine_columns(&self.b, pj, wj))
        } else {
            (Vec::new(), Vec::new())
        };
        let (s_value, s_grad_i, s_grad_j) = self.s_bilinear(pi, wi, pj, wj);
        Bilinear {
            u,
            v,
            s_value,
            s_grad_i,
            s_grad_j,
        }
    }

    /// `∂(v_j̃ᵀΦ_{ℓ̃,j̃}ᵀΦ_{ℓ̃,ĩ}v_ĩ)/∂θ_k` for each feature hyperparameter.
    fn bilinear_feature_grads(&self, bl: &Bilinear, pi: &[usize], wi: &[f64], pj: &[usize], wj: &[f64]) -> Vec<f64> {
        let (Some(da), Some(db)) = (&self.da, &self.db) else {
            return Vec::new();
        };
        da.iter()
            .zip(db)
            .map(|(dak, dbk)| {
                let du = combine_columns(dak, pi, wi);
                let dv = combine_columns(dbk, pj, wj);
                dot(&dv, &bl.u) + dot(&bl.v, &du)
            })
            .collect()
    }

    fn add_feature_grads(&self, est: &mut StochasticEstimate, grads: &[f64], scale: f64) {
        // grads are ordered [log ℓ_1..d, log σ_f²], which is the prefix of the hyper vector
        for (k, g) in grads.iter().enumerate() {
            est.grad_hyper[k] += scale * g;
        }
    }

    fn mu_weights(&self, mu: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let all: Vec<usize> = (0..self.batch.m_tilde()).collect();
        let wi = self.batch.i_tilde.iter().map(|&i| mu[i]).collect();
        let wj = self.batch.j_tilde.iter().map(|&j| mu[j]).collect();
        (all, wi, wj)
    }

    /// Unbiased estimate of `L_μ`.
    ///
    /// value `= −α·y_ℓ̃ᵀΦ_{ℓ̃,ĩ}μ_ĩ + β·μ_j̃ᵀΦ_{ℓ̃,j̃}ᵀΦ_{ℓ̃,ĩ}μ_ĩ + γ·μ_j̃ᵀS_{j̃,ĩ}μ_ĩ`
    ///
    /// `∂/∂μ_{i_a} = −α(Φ_{ℓ̃,ĩ}ᵀy_ℓ̃)_a + β(Φ_{ℓ̃,ĩ}ᵀΦ_{ℓ̃,j̃}μ_j̃)_a + γ(S_{j̃,ĩ}ᵀμ_j̃)_a`,
    /// `∂/∂μ_{j_b} = β(Φ_{ℓ̃,j̃}ᵀΦ_{ℓ̃,ĩ}μ_ĩ)_b + γ(S_{j̃,ĩ}μ_ĩ)_b`,
    /// `∂/∂log σ² = −(data terms)`.
    pub fn l_mu(&self, y: &[f64], noise_variance: f64, mu: &[f64]) -> Result<StochasticEstimate> {
        self.l_mu_impl(Some(y), noise_variance, mu)
    }

    /// `L_μ` with the data terms dropped: `γ·μ_j̃ᵀS_{j̃,ĩ}μ_ĩ` estimates `μᵀSμ`.
    pub fn l_mu_prior(&self, mu: &[f64]) -> Result<StochasticEstimate> {
        self.l_mu_impl(None, 1.0, mu)
    }

    fn l_mu_impl(&self, y: Option<&[f64]>, s2: f64, mu: &[f64]) -> Result<StochasticEstimate> {
        if mu.len() != self.batch.m {
            return invalid("mean vector does not match the basis count");
        }
        if !(s2 > 0.0) {
            return invalid("noise variance must be positive");
        }
        let bt = self.batch;
        let (n, m, mt, nt) = (self.n(), self.m(), self.mt(), self.nt());
        let alpha = 2.0 * n * m / (s2 * nt * mt);
        let beta = n * m * m / (s2 * nt * mt * mt);
        let gamma = m * m / (mt * mt);

        let (all, wi, wj) = self.mu_weights(mu);
        let bl = self.bilinear(&all, &wi, &all, &wj, y.is_some());
        let mut est = StochasticEstimate::zero(self.hyper_len());
        est.value = gamma * bl.s_value;

        for (a, &i) in bt.i_tilde.iter().enumerate() {
            est.add_mu(i, gamma * bl.s_grad_i[a]);
        }
        for (b, &j) in bt.j_tilde.iter().enumerate() {
            est.add_mu(j, gamma * bl.s_grad_j[b]);
        }

        if let Some(y) = y {
            if y.len() != bt.n {
                return invalid("target vector does not match the data");
            }
            let yl: Vec<f64> = bt.l_tilde.iter().map(|&l| y[l]).collect();
            let lin = dot(&yl, &bl.u);
            let quad = dot(&bl.v, &bl.u);
            let data = -alpha * lin + beta * quad;
            est.value += data;
            for (a, &i) in bt.i_tilde.iter().enumerate() {
                est.add_mu(i, -alpha * column_dot(&self.a, a, &yl) + beta * column_dot(&self.a, a, &bl.v));
            }
            for (b, &j) in bt.j_tilde.iter().enumerate() {
                est.add_mu(j, beta * column_dot(&self.b, b, &bl.u));
            }
            let noise = self.expansion.hyper().index().noise_variance();
            est.grad_hyper[noise] -= data;

            if let (Some(da), Some(_)) = (&self.da, &self.db) {
                let quad_grads = self.bilinear_feature_grads(&bl, &all, &wi, &all, &wj);
                for (k, dak) in da.iter().enumerate() {
                    let du = combine_columns(dak, &all, &wi);
                    est.grad_hyper[k] += -alpha * dot(&yl, &du) + beta * quad_grads[k];
                }
            }
        }

        if self.tracks_precisions() {
            // ∂(γ μ_j̃ᵀS_{j̃,ĩ}μ_ĩ)/∂log s_kk = γ·s_kk·μ_k²·#{(a,b): i_a = j_b = k}
            for (a, &i) in bt.i_tilde.iter().enumerate() {
                let s = self.expansion.precision_entry(i, i);
                est.add_log_precision(i, gamma * s * wi[a] * wi[a] * self.count_j(i) as f64);
            }
        }
        Ok(est)
    }

    /// Unbiased estimate of `L_Σ`.
    ///
    /// value `= (m/m̃)·Σ_{r∈r̃}[β·c_{j̃,r}ᵀΦ_{ℓ̃,j̃}ᵀΦ_{ℓ̃,ĩ}c_{ĩ,r} + γ·c_{j̃,r}ᵀS_{j̃,ĩ}c_{ĩ,r} − 2 log c_rr]`
    ///
    /// Only structural chevron entries of each sampled column are visited.
    /// The partials mirror those of [`Self::l_mu`] with `μ` replaced by `c_r`,
    /// plus `−2/c_rr` on the diagonal.
    pub fn l_sigma(&self, noise_variance: f64, state: &VariationalState) -> Result<StochasticEstimate> {
        self.l_sigma_impl(true, noise_variance, state)
    }

    /// `L_Σ` with the data term dropped; estimates `tr(SΣ) − log|Σ|`.
    pub fn l_sigma_prior(&self, state: &VariationalState) -> Result<StochasticEstimate> {
        self.l_sigma_impl(false, 1.0, state)
    }

    fn l_sigma_impl(&self, data: bool, s2: f64, state: &VariationalState) -> Result<StochasticEstimate> {
        self.check_state(state)?;
        if !(s2 > 0.0) {
            return invalid("noise variance must be positive");
        }
        let bt = self.batch;
        let (n, m, mt, nt) = (self.n(), self.m(), self.mt(), self.nt());
        let beta = n * m * m / (s2 * nt * mt * mt);
        let gamma = m * m / (mt * mt);
        let outer = m / mt;
        let noise = self.expansion.hyper().index().noise_variance();
        let mut est = StochasticEstimate::zero(self.hyper_len());

        for &r in &bt.r_tilde {
            let crr = self.check_diag(state, r)?;
            est.value -= outer * 2.0 * crr.ln();
            est.add_c(r, r, -outer * 2.0 / crr);

            let pi = self.column_positions(state, r, false);
            let pj = self.column_positions(state, r, true);
            if pi.is_empty() || pj.is_empty() {
                continue;
            }
            let wi: Vec<f64> = pi.iter().map(|&a| state.c_unchecked(bt.i_tilde[a], r)).collect();
            let wj: Vec<f64> = pj.iter().map(|&b| state.c_unchecked(bt.j_tilde[b], r)).collect();
            let bl = self.bilinear(&pi, &wi, &pj, &wj, data);

            est.value += outer * gamma * bl.s_value;
            for (p, &a) in pi.iter().enumerate() {
                est.add_c(bt.i_tilde[a], r, outer * gamma * bl.s_grad_i[p]);
            }
            for (q, &b) in pj.iter().enumerate() {
                est.add_c(bt.j_tilde[b], r, outer * gamma * bl.s_grad_j[q]);
            }
            if self.tracks_precisions() {
                for (p, &a) in pi.iter().enumerate() {
                    let i = bt.i_tilde[a];
                    let s = self.expansion.precision_entry(i, i);
                    est.add_log_precision(i, outer * gamma * s * wi[p] * wi[p] * self.count_j(i) as f64);
                }
            }
            if data {
                let quad = dot(&bl.v, &bl.u);
                est.value += outer * beta * quad;
                est.grad_hyper[noise] -= outer * beta * quad;
                for &a in &pi {
                    est.add_c(bt.i_tilde[a], r, outer * beta * column_dot(&self.a, a, &bl.v));
                }
                for &b in &pj {
                    est.add_c(bt.j_tilde[b], r, outer * beta * column_dot(&self.b, b, &bl.u));
                }
                if self.has_feature_grads() {
                    let g = self.bilinear_feature_grads(&bl, &pi, &wi, &pj, &wj);
                    self.add_feature_grads(&mut est, &g, outer * beta);
                }
            }
        }
        Ok(est)
    }
}

/// Unbiased estimate of `L_μ` (see [`BatchContext::l_mu`]).
pub fn estimate_l_mu(
    batch: &IndexBatch,
    expansion: &BasisExpansion,
    x: &DMatrix<f64>,
    y: &[f64],
    noise_variance: f64,
    mu: &[f64],
) -> Result<StochasticEstimate> {
    BatchContext::new(batch, expansion, x, false)?.l_mu(y, noise_variance, mu)
}

/// Unbiased estimate of `L_Σ` (see [`BatchContext::l_sigma`]).
pub fn estimate_l_sigma(
    batch: &IndexBatch,
    expansion: &BasisExpansion,
    x: &DMatrix<f64>,
    noise_variance: f64,
    state: &VariationalState,
) -> Result<StochasticEstimate> {
    BatchContext::new(batch, expansion, x, false)?.l_sigma(noise_variance, state)
}

fn require_diagonal(expansion: &BasisExpansion) -> Result<()> {
    if expansion.has_diagonal_prior() {
        Ok(())
    } else {
        Err(QsgpError::Unsupported(
            "the log-determinant estimator needs a diagonal prior precision".into(),
        ))
    }
}

fn log_det_term(batch: &IndexBatch, expansion: &BasisExpansion, est: &mut StochasticEstimate) {
    let outer = batch.m as f64 / batch.m_tilde() as f64;
    let dictionary = expansion.kind() == BasisKind::ExplicitDictionary;
    for &i in &batch.i_tilde {
        est.value -= outer * expansion.precision_entry(i, i).ln();
        if dictionary {
            est.add_log_precision(i, -outer);
        }
    }
    est.value -= batch.m as f64;
}

/// Unbiased estimate of `L_const` for a diagonal prior:
/// `−(m/m̃)Σ_{i∈ĩ} log s_ii − m + n log(2πσ²) + n/(σ²ñ)·y_ℓ̃ᵀy_ℓ̃`.
///
/// `∂/∂log σ² = n − n·y_ℓ̃ᵀy_ℓ̃/(σ²ñ)` and `∂/∂log s_ii = −m/m̃` per occurrence.
pub fn estimate_l_const(
    batch: &IndexBatch,
    expansion: &BasisExpansion,
    y: &[f64],
    noise_variance: f64,
) -> Result<StochasticEstimate> {
    require_diagonal(expansion)?;
    let mut est = estimate_l_const_noise_terms(batch, expansion, y, noise_variance)?;
    log_det_term(batch, expansion, &mut est);
    Ok(est)
}

/// The noise-dependent part of `L_const` only: `n log(2πσ²) + n/(σ²ñ)·y_ℓ̃ᵀy_ℓ̃`.
/// Valid for any prior, since it does not involve `S`.
pub fn estimate_l_const_noise_terms(
    batch: &IndexBatch,
    expansion: &BasisExpansion,
    y: &[f64],
    noise_variance: f64,
) -> Result<StochasticEstimate> {
    if y.len() != batch.n {
        return invalid("target vector does not match the data");
    }
    if !(noise_variance > 0.0) {
        return invalid("noise variance must be positive");
    }
    for &l in &batch.l_tilde {
        crate::error::check_index("data row", l, y.len())?;
    }
    let n = batch.n as f64;
    let nt = batch.n_tilde() as f64;
    let yy: f64 = batch.l_tilde.iter().map(|&l| y[l] * y[l]).sum();
    let mut est = StochasticEstimate::zero(expansion.hyper().len());
    let fit = n * yy / (noise_variance * nt);
    est.value = n * (2.0 * std::f64::consts::PI * noise_variance).ln() + fit;
    est.grad_hyper[expansion.hyper().index().noise_variance()] = n - fit;
    Ok(est)
}

/// Prior part of `L_const`: `−(m/m̃)Σ_{i∈ĩ} log s_ii − m`.
pub fn estimate_l_const_prior(batch: &IndexBatch, expansion: &BasisExpansion) -> Result<StochasticEstimate> {
    require_diagonal(expansion)?;
    let mut est = StochasticEstimate::zero(expansion.hyper().len());
    log_det_term(batch, expansion, &mut est);
    Ok(est)
}

/// Gradient of the stochastic ELBO `−½(L̂_μ + L̂_Σ + L̂_const)` with respect
/// to the log-hyperparameters, ordered as [`crate::features::HyperIndex`].
///
/// Feature derivatives are chained through the data terms of `L̂_μ` and `L̂_Σ`;
/// the prior is the identity for random Fourier features so the `S` terms
/// carry no hyperparameter dependence.
pub fn estimate_hyper_grads(
    batch: &IndexBatch,
    expansion: &BasisExpansion,
    x: &DMatrix<f64>,
    y: &[f64],
    noise_variance: f64,
    state: &VariationalState,
) -> Result<Vec<f64>> {
    if expansion.kind() != BasisKind::RffSeArd {
        return Err(QsgpError::Unsupported(
            "hyperparameter gradients need random Fourier features".into(),
        ));
    }
    let ctx = BatchContext::new(batch, expansion, x, true)?;
    let mut total = ctx.l_mu(y, noise_variance, state.mu())?;
    total.add_scaled(&ctx.l_sigma(noise_variance, state)?, 1.0);
    total.add_scaled(&estimate_l_const(batch, expansion, y, noise_variance)?, 1.0);
    Ok(total.grad_hyper.iter().map(|g| -0.5 * g).collect())
}
