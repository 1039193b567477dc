//! Kernels and basis-function expansions.
//!
//! A [`BasisExpansion`] never materializes the full `n × m` feature matrix.
//! Every block is regenerated on demand from `(seed, hyper, rows, cols)`, so
//! the per-iteration work of the estimators only depends on the block sizes.
//!
//! Random Fourier features use paired sin/cos columns: basis `2j` is
//! `a·cos(ω_jᵀ(x⊘ℓ))` and basis `2j+1` is `a·sin(ω_jᵀ(x⊘ℓ))` with
//! `a = √(2σ_f²/m)` and `ω_j ~ N(0, I)`. With this scaling the prior precision
//! is the identity and `φ(x)ᵀφ(x) = σ_f²` exactly.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_index, invalid, QsgpError, Result};

/// Diagonal jitter added to inducing-point Gram matrices, relative to `σ_f²`.
pub const GRAM_JITTER: f64 = 1e-8;

/// Kernel and likelihood hyperparameters, all stored as logarithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
    pub log_laplace_scale: f64,
}

impl Hyperparameters {
    pub fn new(
        lengthscales: &[f64],
        signal_variance: f64,
        noise_variance: f64,
        laplace_scale: f64,
    ) -> Result<Self> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if lengthscales.is_empty() {
            return invalid("at least one lengthscale is required");
        }
        if !lengthscales.iter().all(|&l| positive(l)) {
            return invalid("lengthscales must be positive and finite");
        }
        if !positive(signal_variance) || !positive(noise_variance) || !positive(laplace_scale) {
            return invalid("variances and scales must be positive and finite");
        }
        Ok(Self {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
            log_noise_variance: noise_variance.ln(),
            log_laplace_scale: laplace_scale.ln(),
        })
    }

    /// Same lengthscale on every input dimension.
    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        Self::new(&vec![lengthscale; dim], signal_variance, noise_variance, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscale(&self, k: usize) -> f64 {
        self.log_lengthscales[k].exp()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn laplace_scale(&self) -> f64 {
        self.log_laplace_scale.exp()
    }

    /// Length of the flattened log-parameter vector, see [`HyperIndex`].
    pub fn len(&self) -> usize {
        self.dim() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self) -> HyperIndex {
        HyperIndex { dim: self.dim() }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_variance);
        v.push(self.log_noise_variance);
        v.push(self.log_laplace_scale);
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() < 4 {
            return invalid("hyperparameter vector too short");
        }
        let d = values.len() - 3;
        let h = Self {
            log_lengthscales: values[..d].to_vec(),
            log_signal_variance: values[d],
            log_noise_variance: values[d + 1],
            log_laplace_scale: values[d + 2],
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .to_vec()
            .iter()
            .all(|v| v.is_finite() && v.exp().is_finite() && v.exp() > 0.0);
        if ok {
            Ok(())
        } else {
            invalid("hyperparameters must exponentiate to positive finite values")
        }
    }
}

/// Positions inside the flattened hyperparameter vector:
/// `[log ℓ_1 .. log ℓ_d, log σ_f², log σ², log b]`.
#[derive(Debug, Clone, Copy)]
pub struct HyperIndex {
    pub dim: usize,
}

impl HyperIndex {
    pub fn lengthscale(&self, k: usize) -> usize {
        k
    }
    pub fn signal_variance(&self) -> usize {
        self.dim
    }
    pub fn noise_variance(&self) -> usize {
        self.dim + 1
    }
    pub fn laplace_scale(&self) -> usize {
        self.dim + 2
    }
    pub fn len(&self) -> usize {
        self.dim + 3
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Squared-exponential kernel with automatic relevance determination.
pub fn se_ard_kernel(x: &[f64], z: &[f64], hyper: &Hyperparameters) -> Result<f64> {
    if x.len() != hyper.dim() || z.len() != hyper.dim() {
        return invalid(format!(
            "kernel inputs have dimensions {} and {}, expected {}",
            x.len(),
            z.len(),
            hyper.dim()
        ));
    }
    if !x.iter().chain(z).all(|v| v.is_finite()) {
        return invalid("kernel inputs must be finite");
    }
    Ok(se_ard_unchecked(x, z, hyper))
}

fn se_ard_unchecked(x: &[f64], z: &[f64], hyper: &Hyperparameters) -> f64 {
    let mut r2 = 0.0;
    for k in 0..x.len() {
        let t = (x[k] - z[k]) / hyper.lengthscale(k);
        r2 += t * t;
    }
    hyper.signal_variance() * (-0.5 * r2).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    RffSeArd,
    InducingPoint,
    ExplicitDictionary,
}

#[derive(Debug, Clone)]
enum Dictionary {
    /// `φ_ij = k(x_i, c_j)` evaluated from stored centers.
    Kernel(Arc<DMatrix<f64>>),
    /// Caller-supplied `n × m` feature matrix (training rows only).
    Matrix(Arc<DMatrix<f64>>),
}

/// Generator of feature-matrix blocks and prior-precision blocks.
#[derive(Debug, Clone)]
pub struct BasisExpansion {
    kind: BasisKind,
    m: usize,
    seed: u64,
    centers: Option<Arc<DMatrix<f64>>>,
    dictionary: Option<Dictionary>,
    precisions: Vec<f64>,
    hyper: Hyperparameters,
}

impl BasisExpansion {
    /// Random Fourier features for the SE-ARD kernel; `m` must be even.
    pub fn rff(m: usize, seed: u64, hyper: Hyperparameters) -> Result<Self> {
        hyper.validate()?;
        if m == 0 || m % 2 != 0 {
            return invalid("random Fourier features need a positive even basis count");
        }
        Ok(Self {
            kind: BasisKind::RffSeArd,
            m,
            seed,
            centers: None,
            dictionary: None,
            precisions: Vec::new(),
            hyper,
        })
    }

    /// Inducing-point expansion: `φ_ij = k(x_i, z_j)` and `S = K(Z, Z) + jitter`.
    pub fn inducing(centers: DMatrix<f64>, hyper: Hyperparameters) -> Result<Self> {
        hyper.validate()?;
        if centers.nrows() == 0 || centers.ncols() != hyper.dim() {
            return invalid("inducing inputs must be a non-empty matrix with d columns");
        }
        Ok(Self {
            kind: BasisKind::InducingPoint,
            m: centers.nrows(),
            seed: 0,
            centers: Some(Arc::new(centers)),
            dictionary: None,
            precisions: Vec::new(),
            hyper,
        })
    }

    /// Kernel dictionary with independent per-basis precisions (relevance vector machine).
    pub fn dictionary_from_kernel(
        centers: DMatrix<f64>,
        hyper: Hyperparameters,
        precisions: Vec<f64>,
    ) -> Result<Self> {
        hyper.validate()?;
        if centers.nrows() == 0 || centers.ncols() != hyper.dim() {
            return invalid("dictionary centers must be a non-empty matrix with d columns");
        }
        Self::check_precisions(&precisions, centers.nrows())?;
        let centers = Arc::new(centers);
        Ok(Self {
            kind: BasisKind::ExplicitDictionary,
            m: centers.nrows(),
            seed: 0,
            centers: Some(centers.clone()),
            dictionary: Some(Dictionary::Kernel(centers)),
            precisions,
            hyper,
        })
    }

    /// Dictionary backed by a caller-supplied feature matrix over the training rows.
    pub fn dictionary_from_matrix(
        phi: DMatrix<f64>,
        precisions: Vec<f64>,
        hyper: Hyperparameters,
    ) -> Result<Self> {
        hyper.validate()?;
        Self::check_precisions(&precisions, phi.ncols())?;
        if phi.iter().any(|v| !v.is_finite()) {
            return invalid("dictionary features must be finite");
        }
        Ok(Self {
            kind: BasisKind::ExplicitDictionary,
            m: phi.ncols(),
            seed: 0,
            centers: None,
            dictionary: Some(Dictionary::Matrix(Arc::new(phi))),
            precisions,
            hyper,
        })
    }

    fn check_precisions(s: &[f64], m: usize) -> Result<()> {
        if s.len() != m {
            return invalid(format!("expected {m} precisions, got {}", s.len()));
        }
        if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
            return invalid("precisions must be positive and finite");
        }
        Ok(())
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn set_hyper(&mut self, hyper: Hyperparameters) -> Result<()> {
        hyper.validate()?;
        if hyper.dim() != self.hyper.dim() {
            return invalid("hyperparameter dimension cannot change");
        }
        self.hyper = hyper;
        Ok(())
    }

    /// Basis centers for inducing-point and kernel-dictionary kinds.
    pub fn centers(&self) -> Option<&DMatrix<f64>> {
        self.centers.as_deref()
    }

    /// Caller-supplied dictionary matrix, if this expansion was built from one.
    pub fn dictionary_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.dictionary {
            Some(Dictionary::Matrix(phi)) => Some(phi),
            _ => None,
        }
    }

    pub fn has_diagonal_prior(&self) -> bool {
        self.kind != BasisKind::InducingPoint
    }

    /// Whether features can be evaluated at arbitrary inputs (needed for prediction).
    pub fn evaluates_new_inputs(&self) -> bool {
        !matches!(self.dictionary, Some(Dictionary::Matrix(_)))
    }

    /// Per-basis precisions of the dictionary kind.
    pub fn precisions(&self) -> &[f64] {
        &self.precisions
    }

    pub fn set_precision(&mut self, i: usize, s: f64) -> Result<()> {
        if self.kind != BasisKind::ExplicitDictionary {
            return Err(QsgpError::Unsupported(
                "per-basis precisions exist only for dictionary expansions".into(),
            ));
        }
        check_index("basis", i, self.m)?;
        if !(s.is_finite() && s > 0.0) {
            return invalid("precision must be positive and finite");
        }
        self.precisions[i] = s;
        Ok(())
    }

    /// Restrict the expansion to a subset of basis functions (dictionary kinds only).
    pub fn select_basis(&self, keep: &[usize]) -> Result<Self> {
        for &i in keep {
            check_index("basis", i, self.m)?;
        }
        let precisions: Vec<f64> = keep.iter().map(|&i| self.precisions[i]).collect();
        match (&self.kind, &self.dictionary) {
            (BasisKind::ExplicitDictionary, Some(Dictionary::Kernel(c))) => {
                let centers = c.select_rows(keep.iter());
                let mut out = self.clone();
                out.m = keep.len();
                out.centers = Some(Arc::new(centers.clone()));
                out.dictionary = Some(Dictionary::Kernel(Arc::new(centers)));
                out.precisions = precisions;
                Ok(out)
            }
            (BasisKind::ExplicitDictionary, Some(Dictionary::Matrix(phi))) => {
                let mut out = self.clone();
                out.m = keep.len();
                out.dictionary = Some(Dictionary::Matrix(Arc::new(phi.select_columns(keep.iter()))));
                out.precisions = precisions;
                Ok(out)
            }
            _ => Err(QsgpError::Unsupported(
                "basis selection is only defined for dictionary expansions".into(),
            )),
        }
    }

    /// Frequency vector `ω_j` of the j-th sin/cos pair, regenerated from `(seed, j)`.
    pub fn frequency(&self, pair: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(pair as u64);
        (0..self.hyper.dim())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    fn rff_amplitude(&self) -> f64 {
        (2.0 * self.hyper.signal_variance() / self.m as f64).sqrt()
    }

    fn check_rows(&self, rows: &[usize], x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.hyper.dim() {
            return invalid(format!(
                "data has {} columns, expansion expects {}",
                x.ncols(),
                self.hyper.dim()
            ));
        }
        let n = match &self.dictionary {
            Some(Dictionary::Matrix(phi)) => phi.nrows().min(x.nrows()),
            _ => x.nrows(),
        };
        for &r in rows {
            check_index("data row", r, n)?;
        }
        Ok(())
    }

    fn check_cols(&self, cols: &[usize]) -> Result<()> {
        for &c in cols {
            check_index("basis", c, self.m)?;
        }
        Ok(())
    }

    /// `Φ_{rows, cols}` with entry `(a, b) = φ_{cols[b]}(x_{rows[a]})`.
    pub fn feature_block(&self, rows: &[usize], x: &DMatrix<f64>, cols: &[usize]) -> Result<DMatrix<f64>> {
        self.check_rows(rows, x)?;
        self.check_cols(cols)?;
        Ok(self.block_unchecked(rows, x, cols))
    }

    pub(crate) fn block_unchecked(&self, rows: &[usize], x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        match self.kind {
            BasisKind::RffSeArd => {
                let scaled = self.scaled_rows(rows, x);
                let amp = self.rff_amplitude();
                for (b, &col) in cols.iter().enumerate() {
                    let omega = self.frequency(col / 2);
                    let use_cos = col % 2 == 0;
                    for a in 0..rows.len() {
                        let arg = dot(&omega, &scaled[a]);
                        out[(a, b)] = amp * if use_cos { arg.cos() } else { arg.sin() };
                    }
                }
            }
            _ => match &self.dictionary {
                Some(Dictionary::Matrix(phi)) => {
                    for (b, &col) in cols.iter().enumerate() {
                        for (a, &row) in rows.iter().enumerate() {
                            out[(a, b)] = phi[(row, col)];
                        }
                    }
                }
                _ => {
                    let centers = self.centers.as_ref().expect("kernel expansion has centers");
                    let xr: Vec<Vec<f64>> = rows.iter().map(|&r| row_vec(x, r)).collect();
                    for (b, &col) in cols.iter().enumerate() {
                        let z = row_vec(centers, col);
                        for a in 0..rows.len() {
                            out[(a, b)] = se_ard_unchecked(&xr[a], &z, &self.hyper);
                        }
                    }
                }
            },
        }
        out
    }

    /// Feature values at a single input point for the given basis columns.
    pub fn features_at(&self, point: &[f64], cols: &[usize]) -> Result<Vec<f64>> {
        if point.len() != self.hyper.dim() {
            return invalid("input dimension mismatch");
        }
        if !self.evaluates_new_inputs() {
            return Err(QsgpError::Unsupported(
                "a matrix-backed dictionary cannot evaluate new inputs".into(),
            ));
        }
        self.check_cols(cols)?;
        let x = DMatrix::from_row_slice(1, point.len(), point);
        Ok(self.block_unchecked(&[0], &x, cols).iter().copied().collect())
    }

    /// Features at a single point for all `m` basis functions.
    pub fn features_all(&self, point: &[f64]) -> Result<Vec<f64>> {
        let cols: Vec<usize> = (0..self.m).collect();
        self.features_at(point, &cols)
    }

    fn scaled_rows(&self, rows: &[usize], x: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let inv: Vec<f64> = (0..self.hyper.dim()).map(|k| 1.0 / self.hyper.lengthscale(k)).collect();
        rows.iter()
            .map(|&r| (0..inv.len()).map(|k| x[(r, k)] * inv[k]).collect())
            .collect()
    }

    /// Feature block plus its derivatives with respect to
    /// `[log ℓ_1 .. log ℓ_d, log σ_f²]`.
    pub fn feature_block_with_grads(
        &self,
        rows: &[usize],
        x: &DMatrix<f64>,
        cols: &[usize],
    ) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        if self.kind != BasisKind::RffSeArd {
            return Err(QsgpError::Unsupported(
                "analytic feature gradients are available for random Fourier features only".into(),
            ));
        }
        self.check_rows(rows, x)?;
        self.check_cols(cols)?;
        let d = self.hyper.dim();
        let scaled = self.scaled_rows(rows, x);
        let amp = self.rff_amplitude();
        let mut phi = DMatrix::zeros(rows.len(), cols.len());
        let mut grads = vec![DMatrix::zeros(rows.len(), cols.len()); d + 1];
        for (b, &col) in cols.iter().enumerate() {
            let omega = self.frequency(col / 2);
            let use_cos = col % 2 == 0;
            for a in 0..rows.len() {
                let arg = dot(&omega, &scaled[a]);
                let (value, slope) = if use_cos {
                    (arg.cos(), -arg.sin())
                } else {
                    (arg.sin(), arg.cos())
                };
                phi[(a, b)] = amp * value;
                // d arg / d log ℓ_k = -ω_k x_k / ℓ_k
                for k in 0..d {
                    grads[k][(a, b)] = -amp * slope * omega[k] * scaled[a][k];
                }
                // amplitude carries √σ_f²
                grads[d][(a, b)] = 0.5 * amp * value;
            }
        }
        Ok((phi, grads))
    }

    /// `∂Φ_{rows,cols}/∂θ` for `θ ∈ [log ℓ_1 .. log ℓ_d, log σ_f²]`.
    pub fn feature_block_grad_hyper(
        &self,
        rows: &[usize],
        x: &DMatrix<f64>,
        cols: &[usize],
    ) -> Result<Vec<DMatrix<f64>>> {
        self.feature_block_with_grads(rows, x, cols).map(|(_, g)| g)
    }

    /// Single prior-precision entry `s_ij`; indices must be valid.
    pub(crate) fn precision_entry(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            BasisKind::RffSeArd => {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }
            BasisKind::ExplicitDictionary => {
                if i == j {
                    self.precisions[i]
                } else {
                    0.0
                }
            }
            BasisKind::InducingPoint => {
                let c = self.centers.as_ref().expect("inducing expansion has centers");
                let k = se_ard_unchecked(&row_vec(c, i), &row_vec(c, j), &self.hyper);
                if i == j {
                    k + GRAM_JITTER * self.hyper.signal_variance()
                } else {
                    k
                }
            }
        }
    }

    /// Diagonal of the prior precision, `s_ii`.
    pub fn precision_diag(&self, i: usize) -> f64 {
        self.precision_entry(i, i)
    }

    /// `S_{rows, cols}`.
    pub fn prior_precision_block(&self, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
        self.check_cols(rows)?;
        self.check_cols(cols)?;
        Ok(self.precision_block_unchecked(rows, cols))
    }

    pub(crate) fn precision_block_unchecked(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| self.precision_entry(rows[a], cols[b]))
    }

    /// Dense `n × m` feature matrix. Intended for small instances and oracles.
    pub fn dense_features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let cols: Vec<usize> = (0..self.m).collect();
        self.feature_block(&rows, x, &cols)
    }

    /// Dense `m × m` prior precision. Intended for small instances and oracles.
    pub fn dense_precision(&self) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..self.m).collect();
        self.precision_block_unchecked(&idx, &idx)
    }
}

pub(crate) fn row_vec(x: &DMatrix<f64>, r: usize) -> Vec<f64> {
    (0..x.ncols()).map(|k| x[(r, k)]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}
