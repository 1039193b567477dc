//! Relevance vector machine: per-basis prior precisions and pruning.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, QsgpError, Result};
use crate::features::{BasisExpansion, BasisKind};
use crate::state::VariationalState;

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e4;

/// Bounds on `log s_i`; far beyond the pruning threshold on the upper side.
pub(crate) const LOG_S_RANGE: (f64, f64) = (-25.0, 25.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvmState {
    pub log_s: Vec<f64>,
    pub prune_threshold: f64,
}

impl RvmState {
    /// Every precision starts at `s0`.
    pub fn new(m: usize, s0: f64) -> Result<Self> {
        if !(s0.is_finite() && s0 > 0.0) {
            return invalid("initial precision must be positive");
        }
        Ok(Self {
            log_s: vec![s0.ln(); m],
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
        })
    }

    pub fn from_precisions(s: &[f64]) -> Result<Self> {
        if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
            return invalid("precisions must be positive and finite");
        }
        Ok(Self {
            log_s: s.iter().map(|v| v.ln()).collect(),
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
        })
    }

    pub fn precision(&self, i: usize) -> f64 {
        self.log_s[i].exp()
    }

    pub fn survivors(&self) -> Vec<usize> {
        (0..self.log_s.len())
            .filter(|&i| self.precision(i) < self.prune_threshold)
            .collect()
    }

    pub(crate) fn check(&self, expansion: &BasisExpansion) -> Result<()> {
        if expansion.kind() != BasisKind::ExplicitDictionary {
            return Err(QsgpError::Unsupported(
                "precision learning needs a dictionary expansion".into(),
            ));
        }
        if self.log_s.len() != expansion.m() {
            return invalid("one log precision per basis is required");
        }
        if !(self.prune_threshold > 0.0) {
            return invalid("prune threshold must be positive");
        }
        if !self.log_s.iter().all(|v| v.is_finite()) {
            return Err(QsgpError::InvalidState("log precisions must be finite".into()));
        }
        Ok(())
    }
}

/// `∂(−ELBO)/∂log s_i = ½(s_i(μ_i² + Σ_ii) − 1)` for a diagonal prior.
pub fn log_precision_gradient(state: &VariationalState, precision: f64, i: usize) -> f64 {
    let mu = state.mu()[i];
    0.5 * (precision * (mu * mu + state.row_sq_norm(i)) - 1.0)
}

#[derive(Debug, Clone)]
pub struct PrunedModel {
    /// Original indices of the surviving bases.
    pub keep: Vec<usize>,
    pub state: VariationalState,
    pub expansion: BasisExpansion,
    pub rvm: RvmState,
    /// Set when nothing survives.
    pub warning: Option<String>,
}

/// Keeps exactly the bases with `s_i < threshold` and compacts `μ`, `C` and
/// the expansion consistently.
pub fn rvm_prune(rvm: &RvmState, state: &VariationalState, expansion: &BasisExpansion) -> Result<PrunedModel> {
    rvm.check(expansion)?;
    if state.m() != expansion.m() {
        return invalid("state and expansion disagree on the basis count");
    }
    let keep = rvm.survivors();
    let mut pruned_expansion = expansion.select_basis(&keep)?;
    for (new, &old) in keep.iter().enumerate() {
        pruned_expansion.set_precision(new, rvm.precision(old))?;
    }
    let warning = keep
        .is_empty()
        .then(|| format!("every basis has precision ≥ {}; the model is empty", rvm.prune_threshold));
    Ok(PrunedModel {
        state: state.select(&keep)?,
        expansion: pruned_expansion,
        rvm: RvmState {
            log_s: keep.iter().map(|&i| rvm.log_s[i]).collect(),
            prune_threshold: rvm.prune_threshold,
        },
        keep,
        warning,
    })
}
