//! Variational parameters `q(w) = N(μ, CCᵀ)` with a chevron-shaped `C`.
//!
//! The first `k` columns of `C` are dense below the diagonal; the remaining
//! columns hold only their diagonal entry. Every diagonal entry is stored as
//! its logarithm, so `c_rr > 0` holds by construction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_index, invalid, QsgpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub(crate) mu: Vec<f64>,
    /// Column `r < k` stores rows `r..m`; entry 0 is `log c_rr`.
    pub(crate) dense_cols: Vec<Vec<f64>>,
    /// `log c_rr` for `r ≥ k`.
    pub(crate) log_diag: Vec<f64>,
    pub(crate) version: u64,
}

impl VariationalState {
    /// `μ = 0`, `C = I`.
    pub fn new(m: usize, k: usize) -> Result<Self> {
        if m == 0 {
            return invalid("basis count must be positive");
        }
        if k > m {
            return invalid("chevron width cannot exceed the basis count");
        }
        Ok(Self {
            mu: vec![0.0; m],
            dense_cols: (0..k).map(|r| vec![0.0; m - r]).collect(),
            log_diag: vec![0.0; m - k],
            version: 0,
        })
    }

    /// Builds a state from a dense factor that already has chevron structure.
    pub fn from_dense(mu: &[f64], c: &DMatrix<f64>, k: usize) -> Result<Self> {
        let m = mu.len();
        if c.nrows() != m || c.ncols() != m {
            return invalid("covariance factor must be m × m");
        }
        let mut state = Self::new(m, k)?;
        state.mu.copy_from_slice(mu);
        for r in 0..m {
            for i in 0..m {
                let v = c[(i, r)];
                if !state.is_structural(i, r) {
                    if v != 0.0 {
                        return Err(QsgpError::InvalidState(format!(
                            "entry ({i}, {r}) lies outside the chevron pattern"
                        )));
                    }
                    continue;
                }
                if i == r && !(v > 0.0) {
                    return Err(QsgpError::InvalidState(format!(
                        "diagonal entry {r} is not positive"
                    )));
                }
                state.set_c_unchecked(i, r, v);
            }
        }
        Ok(state)
    }

    /// Rebuilds a state from its stored parts and checks the chevron invariants.
    pub fn from_parts(mu: Vec<f64>, dense_cols: Vec<Vec<f64>>, log_diag: Vec<f64>) -> Result<Self> {
        let state = Self {
            mu,
            dense_cols,
            log_diag,
            version: 0,
        };
        state.validate()?;
        Ok(state)
    }

    /// Dense column `r` over rows `r..m`, with `log c_rr` in position 0.
    pub fn dense_columns(&self) -> &[Vec<f64>] {
        &self.dense_cols
    }

    /// `log c_rr` for the diagonal tail `r ≥ k`.
    pub fn log_diagonal(&self) -> &[f64] {
        &self.log_diag
    }

    pub fn m(&self) -> usize {
        self.mu.len()
    }

    /// Number of dense leading columns `k`.
    pub fn chevron_width(&self) -> usize {
        self.dense_cols.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Whether `(i, r)` can be nonzero under the chevron pattern.
    #[inline]
    pub fn is_structural(&self, i: usize, r: usize) -> bool {
        if r < self.dense_cols.len() {
            i >= r
        } else {
            i == r
        }
    }

    #[inline]
    pub(crate) fn c_unchecked(&self, i: usize, r: usize) -> f64 {
        let k = self.dense_cols.len();
        if r < k {
            if i < r {
                0.0
            } else if i == r {
                self.dense_cols[r][0].exp()
            } else {
                self.dense_cols[r][i - r]
            }
        } else if i == r {
            self.log_diag[r - k].exp()
        } else {
            0.0
        }
    }

    /// `Σ_ii = Σ_r C_ir²` over the structural entries of row `i`.
    pub fn row_sq_norm(&self, i: usize) -> f64 {
        let k = self.dense_cols.len();
        let mut acc: f64 = (0..k.min(i + 1)).map(|r| self.c_unchecked(i, r).powi(2)).sum();
        if i >= k {
            acc += (2.0 * self.log_diag[i - k]).exp();
        }
        acc
    }

    pub fn c(&self, i: usize, r: usize) -> Result<f64> {
        check_index("factor row", i, self.m())?;
        check_index("factor column", r, self.m())?;
        Ok(self.c_unchecked(i, r))
    }

    pub fn log_c_diag(&self, r: usize) -> f64 {
        let k = self.dense_cols.len();
        if r < k {
            self.dense_cols[r][0]
        } else {
            self.log_diag[r - k]
        }
    }

    pub(crate) fn set_log_c_diag(&mut self, r: usize, v: f64) {
        let k = self.dense_cols.len();
        if r < k {
            self.dense_cols[r][0] = v;
        } else {
            self.log_diag[r - k] = v;
        }
    }

    /// Sets a structural entry; diagonal values are stored as logarithms.
    pub(crate) fn set_c_unchecked(&mut self, i: usize, r: usize, v: f64) {
        if i == r {
            self.set_log_c_diag(r, v.ln());
        } else {
            self.dense_cols[r][i - r] = v;
        }
    }

    pub fn set_mu(&mut self, i: usize, v: f64) -> Result<()> {
        check_index("mean", i, self.m())?;
        self.mu[i] = v;
        self.bump_version();
        Ok(())
    }

    /// Overwrites a structural factor entry.
    pub fn set_c(&mut self, i: usize, r: usize, v: f64) -> Result<()> {
        check_index("factor row", i, self.m())?;
        check_index("factor column", r, self.m())?;
        if !self.is_structural(i, r) {
            return invalid(format!("entry ({i}, {r}) lies outside the chevron pattern"));
        }
        if i == r && !(v > 0.0 && v.is_finite()) {
            return invalid("diagonal entries must be positive and finite");
        }
        self.set_c_unchecked(i, r, v);
        self.bump_version();
        Ok(())
    }

    /// Rows that may be nonzero in column `r`.
    pub fn column_support(&self, r: usize) -> std::ops::Range<usize> {
        if r < self.dense_cols.len() {
            r..self.m()
        } else {
            r..r + 1
        }
    }

    /// Dense `C`. Intended for small instances and oracles.
    pub fn dense_c(&self) -> DMatrix<f64> {
        let m = self.m();
        DMatrix::from_fn(m, m, |i, r| self.c_unchecked(i, r))
    }

    pub fn dense_mu(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mu)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let c = self.dense_c();
        &c * c.transpose()
    }

    /// `Cᵀv` computed in `O(mk + m)`.
    pub fn c_transpose_times(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.m() {
            return invalid("vector length must equal the basis count");
        }
        let k = self.dense_cols.len();
        let mut out = Vec::with_capacity(self.m());
        for (r, col) in self.dense_cols.iter().enumerate() {
            let mut acc = col[0].exp() * v[r];
            for (off, &c) in col.iter().enumerate().skip(1) {
                acc += c * v[r + off];
            }
            out.push(acc);
        }
        for (t, &ld) in self.log_diag.iter().enumerate() {
            out.push(ld.exp() * v[k + t]);
        }
        Ok(out)
    }

    /// Checks the positivity invariant; used when loading persisted states.
    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        let k = self.dense_cols.len();
        if m == 0 || self.log_diag.len() != m - k {
            return Err(QsgpError::InvalidState("inconsistent chevron dimensions".into()));
        }
        for (r, col) in self.dense_cols.iter().enumerate() {
            if col.len() != m - r {
                return Err(QsgpError::InvalidState(format!("dense column {r} has wrong length")));
            }
        }
        let all = self
            .mu
            .iter()
            .chain(self.dense_cols.iter().flatten())
            .chain(self.log_diag.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(QsgpError::InvalidState("non-finite variational parameter".into()));
        }
        for r in 0..m {
            if !(self.c_unchecked(r, r) > 0.0) {
                return Err(QsgpError::InvalidState(format!("diagonal entry {r} underflowed to zero")));
            }
        }
        Ok(())
    }

    /// Keeps the listed bases (ascending), preserving chevron structure.
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        for w in keep.windows(2) {
            if w[0] >= w[1] {
                return invalid("kept indices must be strictly increasing");
            }
        }
        for &i in keep {
            check_index("basis", i, self.m())?;
        }
        let k = self.dense_cols.len();
        let new_k = keep.iter().filter(|&&i| i < k).count();
        let new_m = keep.len();
        let mut out = Self {
            mu: keep.iter().map(|&i| self.mu[i]).collect(),
            dense_cols: (0..new_k).map(|r| vec![0.0; new_m - r]).collect(),
            log_diag: vec![0.0; new_m - new_k],
            version: self.version + 1,
        };
        for (nr, &r) in keep.iter().enumerate() {
            out.set_log_c_diag(nr, self.log_c_diag(r));
            if nr < new_k {
                for (ni, &i) in keep.iter().enumerate().skip(nr + 1) {
                    out.dense_cols[nr][ni - nr] = self.c_unchecked(i, r);
                }
            }
        }
        Ok(out)
    }
}
