//! Stochastic lower bound on the expected log-likelihood for log-concave sites.
//!
//! For each sampled row `ℓ`
//! `a_ℓ = (m/m̃)·φ_{ℓ,ĩ}μ_ĩ` and
//! `b_ℓ = Σ_t (φ_{ℓ,j̃}C_{j̃,r_t})(φ_{ℓ,ĩ}C_{ĩ,r_t})`,
//! and the estimate is `(n/ñ)·Σ_ℓ E_z[log g_ℓ(a_ℓ + κ·z·b_ℓ)]` with `κ = m³/m̃³`.
//! One `(ĩ, j̃, r̃)` draw is shared by every row and every quadrature node.

use nalgebra::DMatrix;

use super::{column_dot, combine_columns, dot, BatchContext, IndexBatch, StochasticEstimate};
use crate::elbo::{gauss_hermite, Likelihood, SiteProjection};
use crate::error::{invalid, Result};
use crate::features::BasisExpansion;
use crate::state::VariationalState;

/// Per sampled column `r_t`: positions, weights and the projections `Φc`.
struct ColumnTerm {
    r: usize,
    pi: Vec<usize>,
    wi: Vec<f64>,
    pj: Vec<usize>,
    wj: Vec<f64>,
    /// `Φ_{ℓ̃,ĩ}c_{ĩ,r}`.
    q: Vec<f64>,
    /// `Φ_{ℓ̃,j̃}c_{j̃,r}`.
    p: Vec<f64>,
}

impl BatchContext<'_> {
    /// Lower-bound estimate with gradients of the returned value.
    ///
    /// With `G_ℓ = E_z[(log g_ℓ)'(u)]` and `H_ℓ = E_z[z·(log g_ℓ)'(u)]`:
    /// `∂/∂μ_{i_a} = (n/ñ)(m/m̃)Σ_ℓ G_ℓ Φ_{ℓ,i_a}`,
    /// `∂/∂C_{i_a,r_t} = (n/ñ)κ Σ_ℓ H_ℓ (Φ_{ℓ,j̃}c_{j̃,r_t}) Φ_{ℓ,i_a}`,
    /// `∂/∂C_{j_b,r_t} = (n/ñ)κ Σ_ℓ H_ℓ (Φ_{ℓ,ĩ}c_{ĩ,r_t}) Φ_{ℓ,j_b}`.
    ///
    /// `quad_points = 0` replaces the quadrature with the batch's single `z` draw.
    pub fn lower_bound(
        &self,
        site: &SiteProjection<'_>,
        state: &VariationalState,
        quad_points: usize,
    ) -> Result<StochasticEstimate> {
        self.check_state(state)?;
        let bt = self.batch;
        if site.len() != bt.n {
            return invalid("site targets do not match the data");
        }
        let (nodes, weights): (Vec<f64>, Vec<f64>) = if quad_points == 0 {
            match bt.z {
                Some(z) => (vec![z], vec![1.0]),
                None => return invalid("z-sampling mode needs a batch drawn with a z sample"),
            }
        } else {
            let gh = gauss_hermite(quad_points);
            (gh.nodes().to_vec(), gh.weights().to_vec())
        };

        let (n, m, mt, nt) = (self.n(), self.m(), self.mt(), self.nt());
        let outer = n / nt;
        let scale_mu = m / mt;
        let kappa = (m / mt).powi(3);
        let nl = bt.n_tilde();
        let all: Vec<usize> = (0..bt.m_tilde()).collect();
        let mu_i: Vec<f64> = bt.i_tilde.iter().map(|&i| state.mu[i]).collect();
        let a_mean: Vec<f64> = combine_columns(&self.a, &all, &mu_i)
            .into_iter()
            .map(|v| scale_mu * v)
            .collect();

        let mut terms = Vec::new();
        let mut b_spread = vec![0.0; nl];
        for &r in &bt.r_tilde {
            self.check_diag(state, r)?;
            let pi = self.column_positions(state, r, false);
            let pj = self.column_positions(state, r, true);
            if pi.is_empty() || pj.is_empty() {
                continue;
            }
            let wi: Vec<f64> = pi.iter().map(|&a| state.c_unchecked(bt.i_tilde[a], r)).collect();
            let wj: Vec<f64> = pj.iter().map(|&b| state.c_unchecked(bt.j_tilde[b], r)).collect();
            let q = combine_columns(&self.a, &pi, &wi);
            let p = combine_columns(&self.b, &pj, &wj);
            for l in 0..nl {
                b_spread[l] += p[l] * q[l];
            }
            terms.push(ColumnTerm { r, pi, wi, pj, wj, q, p });
        }

        let hidx = self.expansion.hyper().index();
        let scale_slot = match site.likelihood {
            Likelihood::Gaussian => Some(hidx.noise_variance()),
            Likelihood::Laplace => Some(hidx.laplace_scale()),
            Likelihood::Logistic => None,
        };
        let mut est = StochasticEstimate::zero(self.hyper_len());
        let mut g_mean = vec![0.0; nl];
        let mut h_spread = vec![0.0; nl];
        for (l, &row) in bt.l_tilde.iter().enumerate() {
            let (mut val, mut g, mut h, mut ds) = (0.0, 0.0, 0.0, 0.0);
            for (&z, &w) in nodes.iter().zip(&weights) {
                let u = a_mean[l] + kappa * z * b_spread[l];
                val += w * site.log_g(row, u);
                let d = site.dlog_g(row, u);
                g += w * d;
                h += w * z * d;
                if scale_slot.is_some() {
                    ds += w * site.dlog_g_dlog_scale(row, u);
                }
            }
            est.value += outer * val;
            g_mean[l] = g;
            h_spread[l] = h;
            if let Some(slot) = scale_slot {
                est.grad_hyper[slot] += outer * ds;
            }
        }

        for (a, &i) in bt.i_tilde.iter().enumerate() {
            est.add_mu(i, outer * scale_mu * column_dot(&self.a, a, &g_mean));
        }
        for t in &terms {
            let hp: Vec<f64> = h_spread.iter().zip(&t.p).map(|(h, p)| h * p).collect();
            let hq: Vec<f64> = h_spread.iter().zip(&t.q).map(|(h, q)| h * q).collect();
            for &a in &t.pi {
                est.add_c(bt.i_tilde[a], t.r, outer * kappa * column_dot(&self.a, a, &hp));
            }
            for &b in &t.pj {
                est.add_c(bt.j_tilde[b], t.r, outer * kappa * column_dot(&self.b, b, &hq));
            }
        }

        if let (Some(da), Some(db)) = (&self.da, &self.db) {
            for (k, (dak, dbk)) in da.iter().zip(db).enumerate() {
                let da_mean = combine_columns(dak, &all, &mu_i);
                let mut d_spread = vec![0.0; nl];
                for t in &terms {
                    let dq = combine_columns(dak, &t.pi, &t.wi);
                    let dp = combine_columns(dbk, &t.pj, &t.wj);
                    for l in 0..nl {
                        d_spread[l] += dp[l] * t.q[l] + t.p[l] * dq[l];
                    }
                }
                est.grad_hyper[k] +=
                    outer * (scale_mu * dot(&g_mean, &da_mean) + kappa * dot(&h_spread, &d_spread));
            }
        }
        Ok(est)
    }
}

/// Stochastic lower bound on `Σ_ℓ E_q[log g_ℓ(φ_ℓw)]` (see [`BatchContext::lower_bound`]).
pub fn estimate_elbo_lower_bound(
    batch: &IndexBatch,
    expansion: &BasisExpansion,
    x: &DMatrix<f64>,
    site: &SiteProjection<'_>,
    state: &VariationalState,
    quad_points: usize,
) -> Result<StochasticEstimate> {
    BatchContext::new(batch, expansion, x, false)?.lower_bound(site, state, quad_points)
}
