//! The stochastic training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::adaptive::{AdaGrad, Adam, Coord, RatePenalties, SparseAdam};
use super::rvm::{log_precision_gradient, RvmState, LOG_S_RANGE};
use super::{closed_form_crr, PrecisionGradient, column_sq_norms, effective_noise, init_state, TrainConfig};
use crate::elbo::{Likelihood, SiteProjection};
use crate::error::{invalid, QsgpError, Result};
use crate::estimators::{
    estimate_l_const, estimate_l_const_noise_terms, estimate_l_const_prior, sample_batch, BatchContext, IndexBatch,
    RngKey, StochasticEstimate,
};
use crate::features::{BasisExpansion, BasisKind, Hyperparameters};
use crate::state::VariationalState;
use crate::variance::{
    cv_linear_correction, cv_quadratic_correction_with, draw_support, ControlVariateState, CvTarget,
    LinearControlVariate, SupportColumns,
};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub elbo_estimate: f64,
    pub l_mu_est: f64,
    pub l_sigma_est: f64,
    pub l_const_est: f64,
    pub lr_v: f64,
    pub lr_h: f64,
    pub step_wall_ms: f64,
    /// The step produced a non-finite value or gradient and was discarded.
    pub rejected: bool,
}

struct Objective {
    /// Estimate of the loss `−ELBO` with its gradients.
    loss: StochasticEstimate,
    l_mu: f64,
    l_sigma: f64,
    l_const: f64,
}

/// Owns everything mutated during training.
pub struct Trainer<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    config: TrainConfig,
    expansion: BasisExpansion,
    state: VariationalState,
    cv: Option<ControlVariateState>,
    linear_cv: Option<LinearControlVariate>,
    rvm: Option<RvmState>,
    ada_mu: AdaGrad,
    ada_cols: Vec<AdaGrad>,
    ada_diag: AdaGrad,
    adam: Adam,
    precision_adam: SparseAdam,
    penalties: RatePenalties,
    t: u64,
    rejected: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        x: &'a DMatrix<f64>,
        y: &'a [f64],
        mut expansion: BasisExpansion,
        config: TrainConfig,
        rvm: Option<RvmState>,
    ) -> Result<Self> {
        let n = x.nrows();
        let m = expansion.m();
        if n == 0 || y.len() != n {
            return invalid("data and targets must be non-empty and aligned");
        }
        if x.ncols() != expansion.hyper().dim() {
            return invalid("input dimension does not match the expansion");
        }
        config.validate_for(n, m)?;
        let gaussian = config.likelihood == Likelihood::Gaussian;
        if let Some(r) = &rvm {
            r.check(&expansion)?;
            if !gaussian {
                return Err(QsgpError::Unsupported(
                    "precision learning is only available for the Gaussian likelihood".into(),
                ));
            }
            for (i, &ls) in r.log_s.iter().enumerate() {
                expansion.set_precision(i, ls.exp())?;
            }
        }
        let state = init_state(&expansion, x, &config)?;
        let cv = if gaussian && config.n_bar > 0 {
            let p = draw_support(n, config.n_bar, config.seed)?;
            Some(ControlVariateState::quadratic(&expansion, x, &state, p)?)
        } else {
            None
        };
        let linear_cv = if gaussian && config.linear_cv {
            Some(LinearControlVariate::new(&expansion, x, y, &state)?)
        } else {
            None
        };
        let k = config.chevron_k;
        let eps = config.adagrad_eps;
        Ok(Self {
            x,
            y,
            ada_mu: AdaGrad::new(m, eps),
            ada_cols: (0..k).map(|r| AdaGrad::new(m - r, eps)).collect(),
            ada_diag: AdaGrad::new(m - k, eps),
            adam: Adam::new(expansion.hyper().len()),
            precision_adam: SparseAdam::new(if rvm.is_some() { m } else { 0 }),
            penalties: RatePenalties::default(),
            config,
            expansion,
            state,
            cv,
            linear_cv,
            rvm,
            t: 0,
            rejected: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn expansion(&self) -> &BasisExpansion {
        &self.expansion
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn control_variate(&self) -> Option<&ControlVariateState> {
        self.cv.as_ref()
    }

    pub fn rvm(&self) -> Option<&RvmState> {
        self.rvm.as_ref()
    }

    pub fn penalties(&self) -> &RatePenalties {
        &self.penalties
    }

    /// Index of the next step.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn rejected_steps(&self) -> u64 {
        self.rejected
    }

    fn hyper_active(&self) -> bool {
        self.t >= self.config.freeze_iters()
    }

    /// Which hyperparameters the current expansion can learn.
    fn hyper_mask(&self) -> Vec<bool> {
        let h = self.expansion.hyper();
        let idx = h.index();
        let rff = self.expansion.kind() == BasisKind::RffSeArd;
        (0..h.len())
            .map(|k| match self.config.likelihood {
                Likelihood::Gaussian => k == idx.noise_variance() || (rff && k <= idx.signal_variance()),
                Likelihood::Laplace => k == idx.laplace_scale() || (rff && k <= idx.signal_variance()),
                Likelihood::Logistic => rff && k <= idx.signal_variance(),
            })
            .collect()
    }

    fn objective(&self, batch: &IndexBatch, cols: Option<&SupportColumns>, feature_grads: bool) -> Result<Objective> {
        let hl = self.expansion.hyper().len();
        let ctx = BatchContext::new(batch, &self.expansion, self.x, feature_grads)?;
        let mut loss = StochasticEstimate::zero(hl);
        if self.config.likelihood == Likelihood::Gaussian {
            let s2 = self.expansion.hyper().noise_variance();
            let mut l_mu = ctx.l_mu(self.y, s2, self.state.mu())?;
            let mut l_sigma = ctx.l_sigma(s2, &self.state)?;
            let l_const = if self.expansion.has_diagonal_prior() {
                estimate_l_const(batch, &self.expansion, self.y, s2)?
            } else {
                estimate_l_const_noise_terms(batch, &self.expansion, self.y, s2)?
            };
            if let (Some(cv), Some(cols)) = (&self.cv, cols) {
                l_mu.add_scaled(&cv_quadratic_correction_with(batch, cv, cols, s2, &self.state, CvTarget::Mean)?, 1.0);
                let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
                for &r in &batch.r_tilde {
                    if r < self.state.chevron_width() {
                        *counts.entry(r).or_insert(0) += 1;
                    }
                }
                let w = batch.m as f64 / batch.m_tilde() as f64;
                for (r, c) in counts {
                    let corr = cv_quadratic_correction_with(batch, cv, cols, s2, &self.state, CvTarget::Column(r))?;
                    l_sigma.add_scaled(&corr, w * c as f64);
                }
            }
            if let Some(lin) = &self.linear_cv {
                l_mu.add_scaled(&cv_linear_correction(batch, Some(lin), s2, &self.state, hl)?, 1.0);
            }
            loss.add_scaled(&l_mu, 0.5);
            loss.add_scaled(&l_sigma, 0.5);
            loss.add_scaled(&l_const, 0.5);
            Ok(Objective {
                l_mu: l_mu.value,
                l_sigma: l_sigma.value,
                l_const: l_const.value,
                loss,
            })
        } else {
            let site = SiteProjection::new(self.config.likelihood, self.y, self.expansion.hyper())?;
            let lb = ctx.lower_bound(&site, &self.state, self.config.quad_points)?;
            let l_mu = ctx.l_mu_prior(self.state.mu())?;
            let l_sigma = ctx.l_sigma_prior(&self.state)?;
            let l_const = if self.expansion.has_diagonal_prior() {
                estimate_l_const_prior(batch, &self.expansion)?
            } else {
                StochasticEstimate::zero(hl)
            };
            loss.add_scaled(&lb, -1.0);
            loss.add_scaled(&l_mu, 0.5);
            loss.add_scaled(&l_sigma, 0.5);
            loss.add_scaled(&l_const, 0.5);
            Ok(Objective {
                l_mu: l_mu.value,
                l_sigma: l_sigma.value,
                l_const: l_const.value,
                loss,
            })
        }
    }

    /// Runs one iteration and returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let start = Instant::now();
        let cfg = self.config.clone();
        let t = self.t;
        let (n, m) = (self.x.nrows(), self.state.m());
        let need_z = cfg.likelihood != Likelihood::Gaussian && cfg.quad_points == 0;
        let batch = sample_batch(RngKey::new(cfg.seed, t), n, m, cfg.m_tilde, cfg.n_tilde, need_z, cfg.full_batch)?;
        let decay = cfg.decay.factor(t, cfg.iterations);
        let active = self.hyper_active();
        let learn_hyper = active && cfg.lr_hyper > 0.0;
        let feature_grads = learn_hyper && self.expansion.kind() == BasisKind::RffSeArd;
        let cols = match &self.cv {
            Some(cv) => {
                // updates also reach the sampled columns through the prior and diagonal terms
                let mut idx = batch.touched_ij();
                idx.extend(&batch.r_tilde);
                idx.sort_unstable();
                idx.dedup();
                Some(cv.support_columns(self.x, &idx)?)
            }
            None => None,
        };
        let obj = self.objective(&batch, cols.as_ref(), feature_grads)?;
        let lr_v = cfg.lr_variational * decay;
        let lr_h = if learn_hyper { cfg.lr_hyper * decay } else { 0.0 };

        let mut row = MetricsRow {
            iteration: t,
            elbo_estimate: -obj.loss.value,
            l_mu_est: obj.l_mu,
            l_sigma_est: obj.l_sigma,
            l_const_est: obj.l_const,
            lr_v,
            lr_h,
            step_wall_ms: 0.0,
            rejected: false,
        };

        let mask = self.hyper_mask();
        if self.penalize_non_finite(&obj.loss, &mask, learn_hyper) {
            row.rejected = true;
            self.rejected += 1;
        } else {
            self.apply_variational(&obj.loss, cols.as_ref(), lr_v)?;
            if learn_hyper {
                self.apply_hyper(&obj.loss, &mask, lr_h)?;
            }
            if active && self.rvm.is_some() && cfg.lr_precision > 0.0 {
                self.apply_precisions(&obj.loss, &batch, cfg.lr_precision)?;
            }
        }
        if cfg.diag_refresh > 0 && (t + 1) % cfg.diag_refresh == 0 {
            self.refresh_diagonal()?;
        }
        self.sync_versions();
        self.t += 1;
        if cfg.record_timing {
            row.step_wall_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        Ok(row)
    }

    /// Halves the rate of every coordinate with a non-finite gradient.
    /// Returns whether the step must be rejected.
    fn penalize_non_finite(&mut self, est: &StochasticEstimate, mask: &[bool], learn_hyper: bool) -> bool {
        let mut bad = Vec::new();
        bad.extend(est.grad_mu.iter().filter(|(_, g)| !g.is_finite()).map(|(&i, _)| Coord::Mu(i)));
        bad.extend(est.grad_c.iter().filter(|(_, g)| !g.is_finite()).map(|(&(i, r), _)| Coord::C(i, r)));
        if learn_hyper {
            bad.extend(
                est.grad_hyper
                    .iter()
                    .enumerate()
                    .filter(|&(k, g)| mask[k] && !g.is_finite())
                    .map(|(k, _)| Coord::Hyper(k)),
            );
        }
        if self.rvm.is_some() {
            bad.extend(
                est.grad_log_precision
                    .iter()
                    .filter(|(_, g)| !g.is_finite())
                    .map(|(&i, _)| Coord::LogPrecision(i)),
            );
        }
        if bad.is_empty() && est.value.is_finite() {
            return false;
        }
        if bad.is_empty() {
            // a non-finite value with finite gradients: penalize what was touched
            bad.extend(est.grad_mu.keys().map(|&i| Coord::Mu(i)));
            bad.extend(est.grad_c.keys().map(|&(i, r)| Coord::C(i, r)));
        }
        for c in bad {
            self.penalties.halve(c);
        }
        true
    }

    fn apply_variational(&mut self, est: &StochasticEstimate, cols: Option<&SupportColumns>, lr: f64) -> Result<()> {
        let k = self.state.chevron_width();
        let mut mu_upd = (Vec::new(), Vec::new(), Vec::new());
        for (&i, &g) in &est.grad_mu {
            let rate = lr * self.penalties.factor(Coord::Mu(i));
            let step = self.ada_mu.step(i, g, rate);
            if step != 0.0 {
                let old = self.state.mu[i];
                if !(old - step).is_finite() {
                    return Err(QsgpError::Numeric(format!("mean entry {i} left the representable range")));
                }
                self.state.mu[i] = old - step;
                mu_upd.0.push(i);
                mu_upd.1.push(old);
                mu_upd.2.push(old - step);
            }
        }
        let mut col_upd: BTreeMap<usize, (Vec<usize>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (&(i, r), &g) in &est.grad_c {
            let rate = lr * self.penalties.factor(Coord::C(i, r));
            let old = self.state.c_unchecked(i, r);
            let new = if i == r {
                // diagonal entries live in log space: ∂/∂log c = c·∂/∂c
                let step = if r < k {
                    self.ada_cols[r].step(0, g * old, rate)
                } else {
                    self.ada_diag.step(r - k, g * old, rate)
                };
                let log_c = self.state.log_c_diag(r) - step;
                let c = log_c.exp();
                // refuse before writing so a failed step leaves a valid state
                if !(c.is_finite() && c > 0.0) {
                    return Err(QsgpError::Numeric(format!("diagonal entry {r} left the representable range")));
                }
                self.state.set_log_c_diag(r, log_c);
                c
            } else {
                let step = self.ada_cols[r].step(i - r, g, rate);
                let v = old - step;
                if !v.is_finite() {
                    return Err(QsgpError::Numeric(format!("factor entry ({i}, {r}) left the representable range")));
                }
                self.state.dense_cols[r][i - r] = v;
                v
            };
            if r < k && new != old {
                let e = col_upd.entry(r).or_default();
                e.0.push(i);
                e.1.push(old);
                e.2.push(new);
            }
        }
        if let (Some(cv), Some(cols)) = (&mut self.cv, cols) {
            cv.update_running(cols, CvTarget::Mean, &mu_upd.0, &mu_upd.1, &mu_upd.2)?;
            for (r, (idx, old, new)) in &col_upd {
                cv.update_running(cols, CvTarget::Column(*r), idx, old, new)?;
            }
        }
        if let Some(lin) = &mut self.linear_cv {
            lin.update(&mu_upd.0, &mu_upd.1, &mu_upd.2)?;
        }
        Ok(())
    }

    fn apply_hyper(&mut self, est: &StochasticEstimate, mask: &[bool], lr: f64) -> Result<()> {
        let grad: Vec<f64> = est
            .grad_hyper
            .iter()
            .zip(mask)
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        let rates: Vec<f64> = (0..grad.len())
            .map(|k| if mask[k] { lr * self.penalties.factor(Coord::Hyper(k)) } else { 0.0 })
            .collect();
        let steps = self.adam.steps(&grad, &rates);
        let mut v = self.expansion.hyper().to_vec();
        for (x, s) in v.iter_mut().zip(steps) {
            *x -= s;
        }
        let h = Hyperparameters::from_slice(&v)
            .map_err(|_| QsgpError::Numeric("hyperparameters left the representable range".into()))?;
        self.expansion.set_hyper(h)
    }

    fn apply_precisions(&mut self, est: &StochasticEstimate, batch: &IndexBatch, lr: f64) -> Result<()> {
        let Some(rvm) = &mut self.rvm else {
            return Ok(());
        };
        let grads = match self.config.precision_gradient {
            PrecisionGradient::Estimator => est.grad_log_precision.clone(),
            PrecisionGradient::SampledExact => batch
                .i_tilde
                .iter()
                .map(|&i| (i, log_precision_gradient(&self.state, rvm.precision(i), i)))
                .collect::<BTreeMap<_, _>>(),
        };
        for (&i, &g) in &grads {
            let rate = lr * self.penalties.factor(Coord::LogPrecision(i));
            let step = self.precision_adam.step(i, g, rate);
            let v = (rvm.log_s[i] - step).clamp(LOG_S_RANGE.0, LOG_S_RANGE.1);
            rvm.log_s[i] = v;
            self.expansion.set_precision(i, v.exp())?;
        }
        Ok(())
    }

    /// Resets every diagonal-tail entry to its closed-form optimum.
    pub fn refresh_diagonal(&mut self) -> Result<()> {
        let norms = column_sq_norms(&self.expansion, self.x, self.config.init_rows, self.config.seed)?;
        let s2 = effective_noise(self.config.likelihood, &self.expansion);
        for r in self.state.chevron_width()..self.state.m() {
            let c = closed_form_crr(norms[r], s2, self.expansion.precision_diag(r))?;
            self.state.set_log_c_diag(r, c.ln());
        }
        Ok(())
    }

    fn sync_versions(&mut self) {
        self.state.bump_version();
        let v = self.state.version();
        if let Some(cv) = &mut self.cv {
            cv.set_version(v);
        }
        if let Some(lin) = &mut self.linear_cv {
            lin.set_version(v);
        }
    }

    /// Runs the remaining iterations, keeping every `log_every`-th row and the last.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.t < self.config.iterations {
            let row = self.step()?;
            if row.iteration % self.config.log_every == 0 || row.iteration + 1 == self.config.iterations {
                rows.push(row);
            }
        }
        Ok(rows)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            expansion: self.expansion,
            state: self.state,
            rvm: self.rvm,
            config: self.config,
            rejected_steps: self.rejected,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub expansion: BasisExpansion,
    pub state: VariationalState,
    pub rvm: Option<RvmState>,
    pub config: TrainConfig,
    pub rejected_steps: u64,
}

/// Trains from the closed-form initialization for `config.iterations` steps.
pub fn train(
    x: &DMatrix<f64>,
    y: &[f64],
    expansion: BasisExpansion,
    config: TrainConfig,
    rvm: Option<RvmState>,
) -> Result<(TrainOutcome, Vec<MetricsRow>)> {
    let mut trainer = Trainer::new(x, y, expansion, config, rvm)?;
    let rows = trainer.run()?;
    Ok((trainer.finish(), rows))
}
