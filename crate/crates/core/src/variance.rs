//! Control variates for the Gaussian-likelihood estimators.
//!
//! A control variate pairs a stochastic term evaluated on a fixed support set
//! with its exact expectation. The expectation depends on running vectors
//! `a = M v` (`M` an `n̄ × m` map, `v` the mean or a dense chevron column) that
//! are kept current with sparse updates, so evaluating it costs `O(n̄)`.
//!
//! The dense gradient of `‖a‖²` is sparsified onto the indices updated in the
//! current step and rescaled so that it stays unbiased.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;

use crate::error::{check_index, invalid, QsgpError, Result};
use crate::estimators::{IndexBatch, RngKey, StochasticEstimate};
use crate::features::{se_ard_kernel, BasisExpansion, BasisKind};
use crate::state::VariationalState;

const SUPPORT_DOMAIN: u64 = 0x5A99;

/// Which variational vector a correction acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvTarget {
    Mean,
    /// Dense chevron column `r < k`.
    Column(usize),
}

#[derive(Debug, Clone)]
enum SupportMap {
    /// `M = Φ_{p,:}` under the frozen feature map.
    Rows { p: Vec<usize> },
    /// `M = L⁻¹K(U, Z)` with `K(U, U) = LLᵀ`.
    Nystrom {
        u: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

/// Support set, frozen features and running vectors.
#[derive(Debug, Clone)]
pub struct ControlVariateState {
    map: SupportMap,
    expansion: BasisExpansion,
    n: usize,
    a_mu: Vec<f64>,
    a_cols: Vec<Vec<f64>>,
    version: u64,
}

/// Draws `n̄` distinct training rows uniformly.
pub fn draw_support(n: usize, n_bar: usize, seed: u64) -> Result<Vec<usize>> {
    if n_bar == 0 || n_bar > n {
        return invalid(format!("support size {n_bar} must be in 1..={n}"));
    }
    let mut rng = RngKey::new(seed, 0).rng(SUPPORT_DOMAIN);
    let mut p = sample(&mut rng, n, n_bar).into_vec();
    p.sort_unstable();
    Ok(p)
}

impl ControlVariateState {
    /// Row-subsampled control variate with support rows `p`. The feature map
    /// is frozen at the current hyperparameters of `expansion`.
    pub fn quadratic(
        expansion: &BasisExpansion,
        x: &DMatrix<f64>,
        state: &VariationalState,
        p: Vec<usize>,
    ) -> Result<Self> {
        if p.is_empty() {
            return invalid("support set must not be empty");
        }
        for &row in &p {
            check_index("support row", row, x.nrows())?;
        }
        let mut cv = Self {
            map: SupportMap::Rows { p },
            expansion: expansion.clone(),
            n: x.nrows(),
            a_mu: Vec::new(),
            a_cols: Vec::new(),
            version: state.version(),
        };
        cv.rebuild(x, state)?;
        Ok(cv)
    }

    /// Nyström control variate for an inducing-point prior `S = K(Z, Z)`,
    /// with support inputs `U`.
    pub fn nystrom(expansion: &BasisExpansion, u: DMatrix<f64>, state: &VariationalState) -> Result<Self> {
        if expansion.kind() != BasisKind::InducingPoint {
            return Err(QsgpError::Unsupported(
                "the Nyström control variate needs an inducing-point expansion".into(),
            ));
        }
        if u.nrows() == 0 || u.ncols() != expansion.hyper().dim() {
            return invalid("support inputs must be a non-empty n̄ × d matrix");
        }
        let hyper = expansion.hyper();
        let mut kuu = DMatrix::zeros(u.nrows(), u.nrows());
        for a in 0..u.nrows() {
            for b in 0..=a {
                let ua: Vec<f64> = u.row(a).iter().copied().collect();
                let ub: Vec<f64> = u.row(b).iter().copied().collect();
                let k = se_ard_kernel(&ua, &ub, hyper)?;
                kuu[(a, b)] = k;
                kuu[(b, a)] = k;
            }
        }
        let chol = match Cholesky::new(kuu.clone()) {
            Some(c) => c,
            None => {
                // one retry with a larger jitter
                let jitter = 1e-6 * hyper.signal_variance();
                Cholesky::new(kuu + DMatrix::identity(u.nrows(), u.nrows()) * jitter)
                    .ok_or_else(|| QsgpError::Numeric("support Gram matrix is singular".into()))?
            }
        };
        let mut cv = Self {
            map: SupportMap::Nystrom { u, chol },
            expansion: expansion.clone(),
            n: 0,
            a_mu: Vec::new(),
            a_cols: Vec::new(),
            version: state.version(),
        };
        cv.rebuild(&DMatrix::zeros(0, expansion.hyper().dim()), state)?;
        Ok(cv)
    }

    pub fn support_size(&self) -> usize {
        match &self.map {
            SupportMap::Rows { p } => p.len(),
            SupportMap::Nystrom { u, .. } => u.nrows(),
        }
    }

    pub fn support_rows(&self) -> Option<&[usize]> {
        match &self.map {
            SupportMap::Rows { p } => Some(p),
            SupportMap::Nystrom { .. } => None,
        }
    }

    pub fn frozen_expansion(&self) -> &BasisExpansion {
        &self.expansion
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn running(&self, target: CvTarget) -> Result<&[f64]> {
        match target {
            CvTarget::Mean => Ok(&self.a_mu),
            CvTarget::Column(r) => {
                check_index("tracked column", r, self.a_cols.len())?;
                Ok(&self.a_cols[r])
            }
        }
    }

    /// `M_{:,cols}`.
    pub fn map_columns(&self, x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
        match &self.map {
            SupportMap::Rows { p } => self.expansion.block_unchecked(p, x, cols),
            SupportMap::Nystrom { u, chol } => {
                let centers = self.expansion.centers().expect("inducing expansion has centers");
                let hyper = self.expansion.hyper();
                let mut k = DMatrix::zeros(u.nrows(), cols.len());
                for (b, &c) in cols.iter().enumerate() {
                    let z: Vec<f64> = centers.row(c).iter().copied().collect();
                    for a in 0..u.nrows() {
                        let ua: Vec<f64> = u.row(a).iter().copied().collect();
                        k[(a, b)] = se_ard_kernel(&ua, &z, hyper).unwrap_or(0.0);
                    }
                }
                chol.l_dirty().solve_lower_triangular(&k).unwrap_or(k)
            }
        }
    }

    /// Recomputes every running vector from the nonzero entries of the state.
    pub fn rebuild(&mut self, x: &DMatrix<f64>, state: &VariationalState) -> Result<()> {
        let nb = self.support_size();
        let nz: Vec<usize> = (0..state.m()).filter(|&i| state.mu()[i] != 0.0).collect();
        self.a_mu = self.apply(x, &nz, &nz.iter().map(|&i| state.mu()[i]).collect::<Vec<_>>(), nb);
        self.a_cols = (0..state.chevron_width())
            .map(|r| {
                let rows: Vec<usize> = state
                    .column_support(r)
                    .filter(|&i| state.c_unchecked(i, r) != 0.0)
                    .collect();
                let vals: Vec<f64> = rows.iter().map(|&i| state.c_unchecked(i, r)).collect();
                self.apply(x, &rows, &vals, nb)
            })
            .collect();
        self.version = state.version();
        Ok(())
    }

    fn apply(&self, x: &DMatrix<f64>, cols: &[usize], vals: &[f64], nb: usize) -> Vec<f64> {
        let mut out = vec![0.0; nb];
        // bounded blocks keep the temporary at O(n̄ · 256)
        for (chunk_c, chunk_v) in cols.chunks(256).zip(vals.chunks(256)) {
            let m = self.map_columns(x, chunk_c);
            let v = m * DVector::from_column_slice(chunk_v);
            for (o, d) in out.iter_mut().zip(v.iter()) {
                *o += d;
            }
        }
        out
    }

    fn check_version(&self, state: &VariationalState) -> Result<()> {
        if self.version != state.version() {
            return Err(QsgpError::InvalidState(format!(
                "control variate is at version {} but the state is at {}",
                self.version,
                state.version()
            )));
        }
        Ok(())
    }

    fn target_values(&self, state: &VariationalState, target: CvTarget, idx: &[usize]) -> Result<Vec<f64>> {
        match target {
            CvTarget::Mean => Ok(idx.iter().map(|&i| state.mu()[i]).collect()),
            CvTarget::Column(r) => {
                if r >= state.chevron_width() || r >= self.a_cols.len() {
                    return invalid(format!("column {r} is not a tracked dense column"));
                }
                Ok(idx.iter().map(|&i| state.c_unchecked(i, r)).collect())
            }
        }
    }

    /// `M_{:,T}` for the distinct entries `T` of `indices`.
    pub fn support_columns(&self, x: &DMatrix<f64>, indices: &[usize]) -> Result<SupportColumns> {
        let m = self.expansion.m();
        for &i in indices {
            check_index("basis", i, m)?;
        }
        let idx: Vec<usize> = indices.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mat = self.map_columns(x, &idx);
        Ok(SupportColumns { idx, mat })
    }

    /// Shared core: `−c_s·v_j̃ᵀM_{:,j̃}ᵀM_{:,ĩ}v_ĩ + c_d·‖a‖²` with sparse gradients.
    fn correction(
        &self,
        batch: &IndexBatch,
        cols: &SupportColumns,
        state: &VariationalState,
        target: CvTarget,
        stoch_scale: f64,
        det_scale: f64,
    ) -> Result<StochasticEstimate> {
        self.check_version(state)?;
        if batch.m != state.m() || batch.m != self.expansion.m() {
            return invalid("batch does not match the basis count");
        }
        let hyper_len = self.expansion.hyper().len();
        let mut est = StochasticEstimate::zero(hyper_len);
        let a = self.running(target)?;
        let lo = match target {
            CvTarget::Mean => 0,
            CvTarget::Column(r) => r,
        };
        let pos_i = cols.positions(&batch.i_tilde)?;
        let pos_j = cols.positions(&batch.j_tilde)?;
        let t = cols.idx.len();

        // aggregate duplicate draws onto the distinct columns
        let mut wi = DVector::zeros(t);
        let mut wj = DVector::zeros(t);
        let (mut any_i, mut any_j) = (false, false);
        for (&i, &p) in batch.i_tilde.iter().zip(&pos_i) {
            if i >= lo {
                wi[p] += self.target_values(state, target, &[i])?[0];
                any_i = true;
            }
        }
        for (&j, &p) in batch.j_tilde.iter().zip(&pos_j) {
            if j >= lo {
                wj[p] += self.target_values(state, target, &[j])?[0];
                any_j = true;
            }
        }
        let touched: Vec<usize> = (0..t).filter(|&p| cols.idx[p] >= lo).collect();
        if touched.is_empty() {
            est.value += det_scale * a.iter().map(|v| v * v).sum::<f64>();
            return Ok(est);
        }
        let u = &cols.mat * &wi;
        let v = &cols.mat * &wj;
        let av = DVector::from_column_slice(a);
        let mut rhs = DMatrix::zeros(av.len(), 3);
        rhs.set_column(0, &v);
        rhs.set_column(1, &u);
        rhs.set_column(2, &av);
        let g = cols.mat.transpose() * rhs;

        // stochastic part over structural positions
        if any_i && any_j {
            est.value -= stoch_scale * u.dot(&v);
            for (&i, &p) in batch.i_tilde.iter().zip(&pos_i) {
                if i >= lo {
                    add_target(&mut est, target, i, -stoch_scale * g[(p, 0)]);
                }
            }
            for (&j, &p) in batch.j_tilde.iter().zip(&pos_j) {
                if j >= lo {
                    add_target(&mut est, target, j, -stoch_scale * g[(p, 1)]);
                }
            }
        }

        // deterministic expectation and its sparsified gradient
        est.value += det_scale * av.norm_squared();
        let scale = sparse_scale(batch.m, lo, touched.len(), 2 * batch.m_tilde());
        for p in touched {
            add_target(&mut est, target, cols.idx[p], scale * 2.0 * det_scale * g[(p, 2)]);
        }
        Ok(est)
    }

    /// `a ← a + M_{:,touched}(new − old)` using precomputed columns.
    pub fn update_running(
        &mut self,
        cols: &SupportColumns,
        target: CvTarget,
        touched: &[usize],
        old_vals: &[f64],
        new_vals: &[f64],
    ) -> Result<()> {
        if touched.len() != old_vals.len() || touched.len() != new_vals.len() {
            return invalid("touched indices and values must align");
        }
        let pos = cols.positions(touched)?;
        let mut delta = DVector::zeros(cols.idx.len());
        for (k, &p) in pos.iter().enumerate() {
            delta[p] += new_vals[k] - old_vals[k];
        }
        let upd = &cols.mat * delta;
        let a = self.running_mut(target)?;
        for (o, d) in a.iter_mut().zip(upd.iter()) {
            *o += d;
        }
        Ok(())
    }

    fn running_mut(&mut self, target: CvTarget) -> Result<&mut Vec<f64>> {
        match target {
            CvTarget::Mean => Ok(&mut self.a_mu),
            CvTarget::Column(r) => {
                check_index("tracked column", r, self.a_cols.len())?;
                Ok(&mut self.a_cols[r])
            }
        }
    }
}

/// Columns `M_{:,T}` of the support map for the distinct indices `T` of one
/// batch; shared by every correction and running update of a step.
#[derive(Debug, Clone)]
pub struct SupportColumns {
    idx: Vec<usize>,
    mat: DMatrix<f64>,
}

impl SupportColumns {
    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    fn positions(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|i| {
                self.idx
                    .binary_search(i)
                    .map_err(|_| QsgpError::InvalidArgument(format!("basis {i} is not among the prepared columns")))
            })
            .collect()
    }
}

fn add_target(est: &mut StochasticEstimate, target: CvTarget, i: usize, g: f64) {
    match target {
        CvTarget::Mean => {
            *est.grad_mu.entry(i).or_insert(0.0) += g;
        }
        CvTarget::Column(r) => {
            *est.grad_c.entry((i, r)).or_insert(0.0) += g;
        }
    }
}

/// Rescaling that keeps a gradient restricted to the distinct sampled indices
/// in `lo..m` unbiased.
///
/// The sampled set is exchangeable over `lo..m`, so conditional on being
/// non-empty each index is included with weight `1/(m − lo)` in expectation
/// of `1/|T|`. The empty event has probability `(lo/m)^draws`.
fn sparse_scale(m: usize, lo: usize, touched: usize, draws: usize) -> f64 {
    let support = (m - lo) as f64;
    let p_empty = (lo as f64 / m as f64).powi(draws as i32);
    support / (touched as f64 * (1.0 - p_empty))
}

/// Row control variate for `β·v_j̃ᵀΦ_{ℓ̃,j̃}ᵀΦ_{ℓ̃,ĩ}v_ĩ`:
/// `−(nm²/(σ²n̄m̃²))·v_j̃ᵀΦ_{p,j̃}ᵀΦ_{p,ĩ}v_ĩ + (n/(σ²n̄))·aᵀa`.
///
/// Its expectation over `(ĩ, j̃)` is zero. The `log σ²` derivative of the
/// whole correction is `−value`.
pub fn cv_quadratic_correction(
    batch: &IndexBatch,
    cv: &ControlVariateState,
    x: &DMatrix<f64>,
    noise_variance: f64,
    state: &VariationalState,
    target: CvTarget,
) -> Result<StochasticEstimate> {
    let cols = cv.support_columns(x, &batch.touched_ij())?;
    cv_quadratic_correction_with(batch, cv, &cols, noise_variance, state, target)
}

/// [`cv_quadratic_correction`] with columns prepared by
/// [`ControlVariateState::support_columns`] for the batch's touched indices.
pub fn cv_quadratic_correction_with(
    batch: &IndexBatch,
    cv: &ControlVariateState,
    cols: &SupportColumns,
    noise_variance: f64,
    state: &VariationalState,
    target: CvTarget,
) -> Result<StochasticEstimate> {
    if !matches!(cv.map, SupportMap::Rows { .. }) {
        return invalid("expected a row-subsampled control variate");
    }
    if !(noise_variance > 0.0) {
        return invalid("noise variance must be positive");
    }
    let n = cv.n as f64;
    let nb = cv.support_size() as f64;
    let m = batch.m as f64;
    let mt = batch.m_tilde() as f64;
    let stoch = n * m * m / (noise_variance * nb * mt * mt);
    let det = n / (noise_variance * nb);
    let mut est = cv.correction(batch, cols, state, target, stoch, det)?;
    let noise = cv.expansion.hyper().index().noise_variance();
    est.grad_hyper[noise] = -est.value;
    Ok(est)
}

/// Nyström control variate for `γ·v_j̃ᵀS_{j̃,ĩ}v_ĩ`:
/// `−(m²/m̃²)·v_ĩᵀW_ĩᵀW_j̃v_j̃ + ‖Wv‖²` with `W = L⁻¹K(U, Z)`.
pub fn cv_nystrom_correction(
    batch: &IndexBatch,
    cv: &ControlVariateState,
    state: &VariationalState,
    target: CvTarget,
) -> Result<StochasticEstimate> {
    if !matches!(cv.map, SupportMap::Nystrom { .. }) {
        return invalid("expected a Nyström control variate");
    }
    let m = batch.m as f64;
    let mt = batch.m_tilde() as f64;
    let x = DMatrix::zeros(0, cv.expansion.hyper().dim());
    let cols = cv.support_columns(&x, &batch.touched_ij())?;
    cv.correction(batch, &cols, state, target, m * m / (mt * mt), 1.0)
}

/// `a ← a + M_{:,touched}(new − old)`.
pub fn cv_update_running(
    cv: &mut ControlVariateState,
    x: &DMatrix<f64>,
    target: CvTarget,
    touched: &[usize],
    old_vals: &[f64],
    new_vals: &[f64],
) -> Result<()> {
    if touched.len() != old_vals.len() || touched.len() != new_vals.len() {
        return invalid("touched indices and values must align");
    }
    let m = cv.expansion.m();
    for &i in touched {
        check_index("basis", i, m)?;
    }
    let mut cols = Vec::with_capacity(touched.len());
    let mut delta = Vec::with_capacity(touched.len());
    for (k, &i) in touched.iter().enumerate() {
        let d = new_vals[k] - old_vals[k];
        if d != 0.0 {
            cols.push(i);
            delta.push(d);
        }
    }
    if cols.is_empty() {
        return Ok(());
    }
    let nb = cv.support_size();
    let upd = cv.apply(x, &cols, &delta, nb);
    let a = match target {
        CvTarget::Mean => &mut cv.a_mu,
        CvTarget::Column(r) => {
            check_index("tracked column", r, cv.a_cols.len())?;
            &mut cv.a_cols[r]
        }
    };
    for (o, d) in a.iter_mut().zip(upd) {
        *o += d;
    }
    Ok(())
}

/// `(n/(σ²n̄))·aᵀa` and its gradient restricted to `touched`, scaled by
/// `m/|touched|`.
pub fn cv_expectation_with_sparse_grad_scaling(
    cv: &ControlVariateState,
    x: &DMatrix<f64>,
    noise_variance: f64,
    touched: &[usize],
) -> Result<(f64, BTreeMap<usize, f64>)> {
    if touched.is_empty() {
        return invalid("at least one touched index is required");
    }
    let m = cv.expansion.m();
    for &i in touched {
        check_index("basis", i, m)?;
    }
    let det = cv.n as f64 / (noise_variance * cv.support_size() as f64);
    let a = &cv.a_mu;
    let value = det * a.iter().map(|v| v * v).sum::<f64>();
    let uniq: Vec<usize> = touched.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let scale = m as f64 / uniq.len() as f64;
    let g = cv.map_columns(x, &uniq).transpose() * DVector::from_column_slice(a);
    let grad = uniq
        .iter()
        .enumerate()
        .map(|(p, &i)| (i, scale * 2.0 * det * g[p]))
        .collect();
    Ok((value, grad))
}

/// Control variate for the linear data term of `L_μ`, using `b = Φᵀy`.
#[derive(Debug, Clone)]
pub struct LinearControlVariate {
    b: Vec<f64>,
    b_dot_mu: f64,
    version: u64,
}

impl LinearControlVariate {
    /// Precomputes `b = Φᵀy` in column blocks (`O(nm)` once).
    pub fn new(expansion: &BasisExpansion, x: &DMatrix<f64>, y: &[f64], state: &VariationalState) -> Result<Self> {
        if y.len() != x.nrows() {
            return invalid("targets do not match the data");
        }
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let yv = DVector::from_column_slice(y);
        let mut b = Vec::with_capacity(expansion.m());
        let all: Vec<usize> = (0..expansion.m()).collect();
        for chunk in all.chunks(256) {
            let blk = expansion.feature_block(&rows, x, chunk)?;
            b.extend((blk.transpose() * &yv).iter().copied());
        }
        Self::from_vector(b, state)
    }

    pub fn from_vector(b: Vec<f64>, state: &VariationalState) -> Result<Self> {
        if b.len() != state.m() {
            return invalid("b must have one entry per basis function");
        }
        let b_dot_mu = b.iter().zip(state.mu()).map(|(x, y)| x * y).sum();
        Ok(Self {
            b,
            b_dot_mu,
            version: state.version(),
        })
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn b_dot_mu(&self) -> f64 {
        self.b_dot_mu
    }

    pub fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    /// `bᵀμ ← bᵀμ + b_touchedᵀ(new − old)`.
    pub fn update(&mut self, touched: &[usize], old_vals: &[f64], new_vals: &[f64]) -> Result<()> {
        if touched.len() != old_vals.len() || touched.len() != new_vals.len() {
            return invalid("touched indices and values must align");
        }
        for (k, &i) in touched.iter().enumerate() {
            check_index("basis", i, self.b.len())?;
            self.b_dot_mu += self.b[i] * (new_vals[k] - old_vals[k]);
        }
        Ok(())
    }
}

/// `(2m/(σ²m̃))·b_ĩᵀμ_ĩ − (2/σ²)·bᵀμ`; zero mean over `ĩ`.
pub fn cv_linear_correction(
    batch: &IndexBatch,
    cv: Option<&LinearControlVariate>,
    noise_variance: f64,
    state: &VariationalState,
    hyper_len: usize,
) -> Result<StochasticEstimate> {
    let cv = cv.ok_or_else(|| {
        QsgpError::Unsupported("the linear control variate needs a precomputed Φᵀy".into())
    })?;
    if cv.version != state.version() {
        return Err(QsgpError::InvalidState("linear control variate is stale".into()));
    }
    let m = batch.m as f64;
    let mt = batch.m_tilde() as f64;
    let s2 = noise_variance;
    let mut est = StochasticEstimate::zero(hyper_len);
    for &i in &batch.i_tilde {
        let c = 2.0 * m / (s2 * mt) * cv.b[i];
        est.value += c * state.mu()[i];
        *est.grad_mu.entry(i).or_insert(0.0) += c;
    }
    est.value -= 2.0 / s2 * cv.b_dot_mu;
    let touched = batch.touched_ij();
    let scale = m / touched.len() as f64;
    for &i in &touched {
        *est.grad_mu.entry(i).or_insert(0.0) -= scale * 2.0 / s2 * cv.b[i];
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_is_m_over_touched_for_the_mean() {
        assert_eq!(sparse_scale(30, 0, 6, 12), 5.0);
        assert_eq!(sparse_scale(30, 0, 30, 60), 1.0);
    }

    #[test]
    fn support_is_distinct_and_sorted() {
        let p = draw_support(100, 20, 3).unwrap();
        assert_eq!(p.len(), 20);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p, draw_support(100, 20, 3).unwrap());
        assert!(draw_support(10, 11, 0).is_err());
        assert!(draw_support(10, 0, 0).is_err());
    }
}
