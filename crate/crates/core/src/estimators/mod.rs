//! Quadruply stochastic estimators of the ELBO terms.
//!
//! One [`IndexBatch`] draws three basis-index vectors `ĩ, j̃, r̃` (length `m̃`)
//! and one row-index vector `ℓ̃` (length `ñ`), uniformly and with replacement.
//! Every estimator touches only the feature blocks `Φ_{ℓ̃,ĩ}` and `Φ_{ℓ̃,j̃}`
//! plus the sampled entries of `μ`, `C` and `S`, so its cost is independent
//! of `n` and `m`.
//!
//! Gradients are returned in closed form as sparse maps. Repeated indices
//! contribute once per occurrence.

mod gaussian;
mod lower_bound;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, QsgpError, Result};
use crate::features::{BasisExpansion, BasisKind};
use crate::state::VariationalState;

pub use gaussian::{
    estimate_hyper_grads, estimate_l_const, estimate_l_const_noise_terms, estimate_l_const_prior,
    estimate_l_mu, estimate_l_sigma,
};
pub use lower_bound::estimate_elbo_lower_bound;

/// Reproducibility key: the batch is a pure function of `(seed, iteration)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub iteration: u64,
}

impl RngKey {
    pub fn new(seed: u64, iteration: u64) -> Self {
        Self { seed, iteration }
    }

    pub(crate) fn rng(&self, domain: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(self.iteration);
        rng
    }
}

const BATCH_DOMAIN: u64 = 0xB47C;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexBatch {
    pub i_tilde: Vec<usize>,
    pub j_tilde: Vec<usize>,
    pub r_tilde: Vec<usize>,
    pub l_tilde: Vec<usize>,
    /// Standard-normal draw, present when requested.
    pub z: Option<f64>,
    pub rng_key: RngKey,
    pub n: usize,
    pub m: usize,
}

impl IndexBatch {
    pub fn m_tilde(&self) -> usize {
        self.i_tilde.len()
    }

    pub fn n_tilde(&self) -> usize {
        self.l_tilde.len()
    }

    /// Distinct basis indices in `ĩ ∪ j̃`, ascending.
    pub fn touched_ij(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.i_tilde.iter().chain(&self.j_tilde).copied().collect();
        set.into_iter().collect()
    }
}

/// Draws the four index vectors for one estimator evaluation.
///
/// With `full_batch` the indices enumerate `0..m` and `0..n` in order, which
/// requires `m̃ = m` and `ñ = n`.
pub fn sample_batch(
    rng_key: RngKey,
    n: usize,
    m: usize,
    m_tilde: usize,
    n_tilde: usize,
    need_z: bool,
    full_batch: bool,
) -> Result<IndexBatch> {
    if m_tilde == 0 || n_tilde == 0 {
        return invalid("mini-batch sizes must be positive");
    }
    if m_tilde > m || n_tilde > n {
        return invalid(format!(
            "mini-batch sizes (m̃={m_tilde}, ñ={n_tilde}) exceed the problem size (m={m}, n={n})"
        ));
    }
    let mut rng = rng_key.rng(BATCH_DOMAIN);
    let (i_tilde, j_tilde, r_tilde, l_tilde) = if full_batch {
        if m_tilde != m || n_tilde != n {
            return invalid("enumeration mode requires m̃ = m and ñ = n");
        }
        let all: Vec<usize> = (0..m).collect();
        (all.clone(), all.clone(), all, (0..n).collect())
    } else {
        let mut draw = |len: usize, range: usize| -> Vec<usize> {
            (0..len).map(|_| rng.random_range(0..range as u64) as usize).collect()
        };
        let i = draw(m_tilde, m);
        let j = draw(m_tilde, m);
        let r = draw(m_tilde, m);
        let l = draw(n_tilde, n);
        (i, j, r, l)
    };
    let z = need_z.then(|| rng.sample(StandardNormal));
    Ok(IndexBatch {
        i_tilde,
        j_tilde,
        r_tilde,
        l_tilde,
        z,
        rng_key,
        n,
        m,
    })
}

/// Value and sparse gradients of one stochastic term.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticEstimate {
    pub value: f64,
    pub grad_mu: BTreeMap<usize, f64>,
    /// Keyed by `(row, column)` of `C`; derivatives are with respect to the raw entry.
    pub grad_c: BTreeMap<(usize, usize), f64>,
    /// Ordered as [`crate::features::HyperIndex`].
    pub grad_hyper: Vec<f64>,
    /// Derivatives with respect to `log s_ii` for dictionary expansions.
    pub grad_log_precision: BTreeMap<usize, f64>,
}

impl StochasticEstimate {
    pub fn zero(hyper_len: usize) -> Self {
        Self {
            value: 0.0,
            grad_mu: BTreeMap::new(),
            grad_c: BTreeMap::new(),
            grad_hyper: vec![0.0; hyper_len],
            grad_log_precision: BTreeMap::new(),
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &StochasticEstimate, scale: f64) {
        self.value += scale * other.value;
        for (&k, &g) in &other.grad_mu {
            *self.grad_mu.entry(k).or_insert(0.0) += scale * g;
        }
        for (&k, &g) in &other.grad_c {
            *self.grad_c.entry(k).or_insert(0.0) += scale * g;
        }
        for (h, g) in self.grad_hyper.iter_mut().zip(&other.grad_hyper) {
            *h += scale * g;
        }
        for (&k, &g) in &other.grad_log_precision {
            *self.grad_log_precision.entry(k).or_insert(0.0) += scale * g;
        }
    }

    /// Basis indices with a gradient entry in `μ`, `C` or the precisions.
    pub fn touched(&self) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = self.grad_mu.keys().copied().collect();
        for &(i, r) in self.grad_c.keys() {
            out.insert(i);
            out.insert(r);
        }
        out.extend(self.grad_log_precision.keys().copied());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_mu.values().all(|v| v.is_finite())
            && self.grad_c.values().all(|v| v.is_finite())
            && self.grad_hyper.iter().all(|v| v.is_finite())
            && self.grad_log_precision.values().all(|v| v.is_finite())
    }

    pub(crate) fn add_mu(&mut self, i: usize, g: f64) {
        *self.grad_mu.entry(i).or_insert(0.0) += g;
    }

    pub(crate) fn add_c(&mut self, i: usize, r: usize, g: f64) {
        *self.grad_c.entry((i, r)).or_insert(0.0) += g;
    }

    pub(crate) fn add_log_precision(&mut self, i: usize, g: f64) {
        *self.grad_log_precision.entry(i).or_insert(0.0) += g;
    }
}

/// Feature blocks and index lookups shared by all estimators of one batch.
pub struct BatchContext<'a> {
    pub(crate) batch: &'a IndexBatch,
    pub(crate) expansion: &'a BasisExpansion,
    /// `Φ_{ℓ̃,ĩ}`.
    pub(crate) a: DMatrix<f64>,
    /// `Φ_{ℓ̃,j̃}`.
    pub(crate) b: DMatrix<f64>,
    /// Derivatives of `a` and `b` with respect to `[log ℓ, log σ_f²]`.
    pub(crate) da: Option<Vec<DMatrix<f64>>>,
    pub(crate) db: Option<Vec<DMatrix<f64>>>,
    /// `S_{j̃,ĩ}` for non-diagonal priors.
    pub(crate) s_ji: Option<DMatrix<f64>>,
    pos_i: HashMap<usize, Vec<usize>>,
    pos_j: HashMap<usize, Vec<usize>>,
}

fn positions(idx: &[usize]) -> HashMap<usize, Vec<usize>> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::with_capacity(idx.len());
    for (a, &i) in idx.iter().enumerate() {
        map.entry(i).or_default().push(a);
    }
    map
}

impl<'a> BatchContext<'a> {
    /// Evaluates the feature blocks of `batch`. With `feature_grads` the
    /// hyperparameter derivatives of the blocks are also formed (random
    /// Fourier features only).
    pub fn new(
        batch: &'a IndexBatch,
        expansion: &'a BasisExpansion,
        x: &DMatrix<f64>,
        feature_grads: bool,
    ) -> Result<Self> {
        if batch.m != expansion.m() {
            return invalid("batch was drawn for a different basis count");
        }
        if batch.i_tilde.len() != batch.j_tilde.len() || batch.i_tilde.len() != batch.r_tilde.len() {
            return invalid("ĩ, j̃ and r̃ must have equal length");
        }
        for &r in &batch.r_tilde {
            crate::error::check_index("basis", r, expansion.m())?;
        }
        let (a, b, da, db) = if feature_grads {
            let (a, da) = expansion.feature_block_with_grads(&batch.l_tilde, x, &batch.i_tilde)?;
            let (b, db) = expansion.feature_block_with_grads(&batch.l_tilde, x, &batch.j_tilde)?;
            (a, b, Some(da), Some(db))
        } else {
            let a = expansion.feature_block(&batch.l_tilde, x, &batch.i_tilde)?;
            let b = expansion.feature_block(&batch.l_tilde, x, &batch.j_tilde)?;
            (a, b, None, None)
        };
        let s_ji = (!expansion.has_diagonal_prior())
            .then(|| expansion.precision_block_unchecked(&batch.j_tilde, &batch.i_tilde));
        Ok(Self {
            batch,
            expansion,
            a,
            b,
            da,
            db,
            s_ji,
            pos_i: positions(&batch.i_tilde),
            pos_j: positions(&batch.j_tilde),
        })
    }

    pub fn batch(&self) -> &IndexBatch {
        self.batch
    }

    pub(crate) fn n(&self) -> f64 {
        self.batch.n as f64
    }

    pub(crate) fn m(&self) -> f64 {
        self.batch.m as f64
    }

    pub(crate) fn mt(&self) -> f64 {
        self.batch.m_tilde() as f64
    }

    pub(crate) fn nt(&self) -> f64 {
        self.batch.n_tilde() as f64
    }

    pub(crate) fn hyper_len(&self) -> usize {
        self.expansion.hyper().len()
    }

    pub(crate) fn count_i(&self, basis: usize) -> usize {
        self.pos_i.get(&basis).map_or(0, Vec::len)
    }

    pub(crate) fn count_j(&self, basis: usize) -> usize {
        self.pos_j.get(&basis).map_or(0, Vec::len)
    }

    pub(crate) fn has_feature_grads(&self) -> bool {
        self.da.is_some()
    }

    pub(crate) fn tracks_precisions(&self) -> bool {
        self.expansion.kind() == BasisKind::ExplicitDictionary
    }

    /// Positions `a` in `ĩ` (or `j̃`) whose entry `C(idx_a, r)` is structural.
    pub(crate) fn column_positions(&self, state: &VariationalState, r: usize, use_j: bool) -> Vec<usize> {
        let idx = if use_j { &self.batch.j_tilde } else { &self.batch.i_tilde };
        if r < state.chevron_width() {
            idx.iter()
                .enumerate()
                .filter(|(_, &i)| i >= r)
                .map(|(a, _)| a)
                .collect()
        } else {
            let pos = if use_j { &self.pos_j } else { &self.pos_i };
            pos.get(&r).cloned().unwrap_or_default()
        }
    }

    pub(crate) fn check_state(&self, state: &VariationalState) -> Result<()> {
        if state.m() != self.batch.m {
            return invalid("variational state does not match the basis count");
        }
        Ok(())
    }

    pub(crate) fn check_diag(&self, state: &VariationalState, r: usize) -> Result<f64> {
        let c = state.c_unchecked(r, r);
        if !(c > 0.0 && c.is_finite()) {
            return Err(QsgpError::InvalidState(format!(
                "sampled diagonal entry c_{r}{r} = {c} is not positive"
            )));
        }
        Ok(c)
    }
}

/// `Σ_a M[:, a]·w_a` over the listed columns.
pub(crate) fn combine_columns(mat: &DMatrix<f64>, cols: &[usize], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mat.nrows()];
    for (&a, &wa) in cols.iter().zip(w) {
        if wa == 0.0 {
            continue;
        }
        let col = mat.column(a);
        for (o, v) in out.iter_mut().zip(col.iter()) {
            *o += v * wa;
        }
    }
    out
}

/// `M[:, a]ᵀ v`.
#[inline]
pub(crate) fn column_dot(mat: &DMatrix<f64>, a: usize, v: &[f64]) -> f64 {
    mat.column(a).iter().zip(v).map(|(x, y)| x * y).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_batch() {
        let k = RngKey::new(7, 3);
        let a = sample_batch(k, 100, 50, 10, 5, true, false).unwrap();
        let b = sample_batch(k, 100, 50, 10, 5, true, false).unwrap();
        assert_eq!(a, b);
        let c = sample_batch(RngKey::new(7, 4), 100, 50, 10, 5, true, false).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn enumeration_mode() {
        let b = sample_batch(RngKey::new(0, 0), 4, 3, 3, 4, false, true).unwrap();
        assert_eq!(b.i_tilde, vec![0, 1, 2]);
        assert_eq!(b.j_tilde, vec![0, 1, 2]);
        assert_eq!(b.r_tilde, vec![0, 1, 2]);
        assert_eq!(b.l_tilde, vec![0, 1, 2, 3]);
        assert!(b.z.is_none());
        assert!(sample_batch(RngKey::new(0, 0), 4, 3, 2, 4, false, true).is_err());
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(sample_batch(RngKey::new(0, 0), 4, 3, 0, 4, false, false).is_err());
        assert!(sample_batch(RngKey::new(0, 0), 4, 3, 1, 0, false, false).is_err());
        assert!(sample_batch(RngKey::new(0, 0), 4, 3, 4, 1, false, false).is_err());
    }

    #[test]
    fn indices_are_uniform() {
        let b = sample_batch(RngKey::new(11, 0), 10, 10, 10, 10, false, false).unwrap();
        assert_eq!(b.i_tilde.len(), 10);
        let mut counts = [0usize; 10];
        for it in 0..10_000u64 {
            let b = sample_batch(RngKey::new(11, it), 10, 10, 10, 1, false, false).unwrap();
            for &i in &b.i_tilde {
                counts[i] += 1;
            }
        }
        // 10^5 draws over 10 categories
        let expect = 10_000.0;
        let sd = (100_000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() <= 5.0 * sd, "count {c}");
        }
    }
}
