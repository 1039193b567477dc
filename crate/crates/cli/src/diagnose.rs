//! Monte Carlo checks of the stochastic estimators against exact values on
//! instances small enough to enumerate.

use nalgebra::{DMatrix, DVector};
use qsgp_core::elbo::{exact_elbo, exact_gradients, expected_log_lik, Likelihood, SiteProjection};
use qsgp_core::estimators::{estimate_l_const, sample_batch, BatchContext, IndexBatch, RngKey};
use qsgp_core::features::{BasisExpansion, Hyperparameters};
use qsgp_core::variance::{cv_quadratic_correction, draw_support, ControlVariateState, CvTarget};
use qsgp_core::{Result, VariationalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Running mean and variance (Welford).
#[derive(Debug, Default, Clone)]
pub struct Stats {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Stats {
    pub fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n as u64
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        self.m2 / (self.n - 1.0)
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n).sqrt()
    }

    /// `(mean − target)/se`; a zero standard error counts as exact agreement
    /// up to roundoff and as infinitely far otherwise.
    pub fn z(&self, target: f64) -> f64 {
        let se = self.std_error();
        let d = self.mean - target;
        if se > 0.0 {
            d / se
        } else if d.abs() <= 1e-10 * (1.0 + target.abs()) {
            0.0
        } else {
            d.signum() * f64::INFINITY
        }
    }
}

/// One line of diagnostic output. `NaN` marks a field that does not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub report: &'static str,
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub oracle: f64,
    pub z: f64,
}

impl Row {
    fn compared(report: &'static str, term: impl Into<String>, s: &Stats, oracle: f64) -> Self {
        Row {
            report,
            term: term.into(),
            estimate: s.mean(),
            std_error: s.std_error(),
            oracle,
            z: s.z(oracle),
        }
    }

    pub fn failed(&self, limit: f64) -> bool {
        // NaN z means nothing was compared
        self.z.abs() > limit
    }
}

pub const CSV_HEADER: &str = "report,term,estimate,std_error,oracle,z";

pub fn to_csv(rows: &[Row]) -> String {
    let f = |v: f64| if v.is_nan() { String::new() } else { format!("{v:?}") };
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.report,
            r.term,
            f(r.estimate),
            f(r.std_error),
            f(r.oracle),
            f(r.z)
        ));
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random-feature regression problem with a fixed variational state.
#[derive(Debug, Clone)]
pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub expansion: BasisExpansion,
    pub state: VariationalState,
}

impl Instance {
    /// `n` points in `[−2, 2]^d` with uniform targets and a random chevron state.
    pub fn synthetic(n: usize, m: usize, d: usize, k: usize, seed: u64) -> Result<Self> {
        let mut r = rng(seed);
        let x = DMatrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0));
        let y = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
        let hyper = Hyperparameters::new(&vec![1.3; d], 1.2, 0.4, 0.8)?;
        Self::from_data(x, y, hyper, m, k, seed)
    }

    pub fn from_data(x: DMatrix<f64>, y: Vec<f64>, hyper: Hyperparameters, m: usize, k: usize, seed: u64) -> Result<Self> {
        let expansion = BasisExpansion::rff(m, seed.wrapping_add(1000), hyper)?;
        let state = random_state(m, k, seed.wrapping_add(1))?;
        Ok(Self { x, y, expansion, state })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.expansion.m()
    }

    pub fn noise(&self) -> f64 {
        self.expansion.hyper().noise_variance()
    }

    pub fn phi(&self) -> Result<DMatrix<f64>> {
        self.expansion.dense_features(&self.x)
    }

    /// Targets reduced to `±1` by sign.
    pub fn signs(&self) -> Vec<f64> {
        self.y.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect()
    }

    pub fn batch(&self, seed: u64, t: u64, m_tilde: usize, n_tilde: usize) -> Result<IndexBatch> {
        sample_batch(RngKey::new(seed, t), self.n(), self.m(), m_tilde, n_tilde, false, false)
    }
}

/// Random lower-triangular factor with `k` dense leading columns.
pub fn random_state(m: usize, k: usize, seed: u64) -> Result<VariationalState> {
    let mut r = rng(seed);
    let mu: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let c = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            r.random_range(0.3..1.2)
        } else if j < k && i > j {
            r.random_range(-0.4..0.4)
        } else {
            0.0
        }
    });
    VariationalState::from_dense(&mu, &c, k)
}

/// Monte Carlo means of the three Gaussian-likelihood estimators and of the
/// `μ` and `C` gradients, each compared with the exact value.
pub fn estimator_reports(inst: &Instance, m_tilde: usize, n_tilde: usize, reps: u64, seed: u64) -> Result<Vec<Row>> {
    let (m, s2, state) = (inst.m(), inst.noise(), &inst.state);
    let phi = inst.phi()?;
    let s = inst.expansion.dense_precision();
    let y = DVector::from_column_slice(&inst.y);
    let exact = exact_elbo(&phi, &s, &y, s2, &state.dense_mu(), &state.dense_c())?;
    let grads = exact_gradients(&phi, &s, &y, s2, &state.dense_mu(), &state.dense_c())?;

    let structural: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..=i).map(move |r| (i, r)))
        .filter(|&(i, r)| state.is_structural(i, r))
        .collect();
    let (mut l_mu, mut l_sigma, mut l_const) = (Stats::default(), Stats::default(), Stats::default());
    let mut g_mu = vec![Stats::default(); m];
    let mut g_c = vec![Stats::default(); structural.len()];
    for t in 0..reps {
        let b = inst.batch(seed, t, m_tilde, n_tilde)?;
        let ctx = BatchContext::new(&b, &inst.expansion, &inst.x, false)?;
        let mu_est = ctx.l_mu(&inst.y, s2, state.mu())?;
        let sig_est = ctx.l_sigma(s2, state)?;
        l_mu.push(mu_est.value);
        l_sigma.push(sig_est.value);
        l_const.push(estimate_l_const(&b, &inst.expansion, &inst.y, s2)?.value);
        for (i, g) in g_mu.iter_mut().enumerate() {
            g.push(mu_est.grad_mu.get(&i).copied().unwrap_or(0.0));
        }
        for (g, ir) in g_c.iter_mut().zip(&structural) {
            g.push(sig_est.grad_c.get(ir).copied().unwrap_or(0.0));
        }
    }
    let mut rows = vec![
        Row::compared("unbiasedness", "l_mu", &l_mu, exact.l_mu),
        Row::compared("unbiasedness", "l_sigma", &l_sigma, exact.l_sigma),
        Row::compared("unbiasedness", "l_const", &l_const, exact.l_const),
    ];
    for (i, g) in g_mu.iter().enumerate() {
        rows.push(Row::compared("gradient", format!("d_l_mu/d_mu[{i}]"), g, grads.l_mu_mu[i]));
    }
    for (g, &(i, r)) in g_c.iter().zip(&structural) {
        rows.push(Row::compared("gradient", format!("d_l_sigma/d_c[{i};{r}]"), g, grads.l_sigma_c[(i, r)]));
    }
    Ok(rows)
}

/// `β·v_j̃ᵀΦ_{ℓ̃,j̃}ᵀΦ_{ℓ̃,ĩ}v_ĩ`, the quadratic part of the `L_μ` estimate.
pub fn quadratic_term(b: &IndexBatch, e: &BasisExpansion, x: &DMatrix<f64>, s2: f64, v: &[f64]) -> Result<f64> {
    let a = e.feature_block(&b.l_tilde, x, &b.i_tilde)?;
    let bb = e.feature_block(&b.l_tilde, x, &b.j_tilde)?;
    let vi = DVector::from_iterator(b.i_tilde.len(), b.i_tilde.iter().map(|&i| v[i]));
    let vj = DVector::from_iterator(b.j_tilde.len(), b.j_tilde.iter().map(|&j| v[j]));
    let (n, m, mt, nt) = (b.n as f64, b.m as f64, b.m_tilde() as f64, b.n_tilde() as f64);
    Ok(n * m * m / (s2 * nt * mt * mt) * (bb * vj).dot(&(a * vi)))
}

/// Quadratic-term statistics for one control-variate support size.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub n_bar: usize,
    /// Corrected quadratic term.
    pub corrected: Stats,
    /// The correction alone, whose mean must vanish.
    pub correction: Stats,
}

/// Paired comparison of support sizes on one batch stream over the
/// `n = 2000`, `m = 500` random-feature instance (`n̄ = 0` is uncorrected).
pub fn cv_sweep(n_bars: &[usize], reps: u64, seed: u64) -> Result<Vec<SweepPoint>> {
    let (n, m) = (2000, 500);
    let mut r = rng(seed.wrapping_add(81));
    let x = DMatrix::from_fn(n, 1, |_, _| r.random_range(-1.0..1.0));
    let hyper = Hyperparameters::new(&[2.0], 1.0, 0.1, 1.0)?;
    let e = BasisExpansion::rff(m, seed.wrapping_add(82), hyper)?;
    let mu: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut state = VariationalState::new(m, 0)?;
    for (i, &v) in mu.iter().enumerate() {
        state.set_mu(i, v)?;
    }
    let cvs = n_bars
        .iter()
        .map(|&nb| {
            (nb > 0)
                .then(|| ControlVariateState::quadratic(&e, &x, &state, draw_support(n, nb, seed.wrapping_add(83))?))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<SweepPoint> = n_bars
        .iter()
        .map(|&n_bar| SweepPoint {
            n_bar,
            corrected: Stats::default(),
            correction: Stats::default(),
        })
        .collect();
    for t in 0..reps {
        let b = sample_batch(RngKey::new(seed.wrapping_add(84), t), n, m, 50, 50, false, false)?;
        let term = quadratic_term(&b, &e, &x, 0.1, &mu)?;
        for (cv, p) in cvs.iter().zip(out.iter_mut()) {
            let c = match cv {
                Some(cv) => cv_quadratic_correction(&b, cv, &x, 0.1, &state, CvTarget::Mean)?.value,
                None => 0.0,
            };
            p.corrected.push(term + c);
            p.correction.push(c);
        }
    }
    Ok(out)
}

pub fn cv_reports(points: &[SweepPoint]) -> Vec<Row> {
    let mut rows = Vec::new();
    for p in points {
        if p.n_bar > 0 {
            rows.push(Row::compared("control_variate", format!("correction_mean[nbar={}]", p.n_bar), &p.correction, 0.0));
        }
    }
    for p in points {
        rows.push(Row {
            report: "control_variate",
            term: format!("corrected_variance[nbar={}]", p.n_bar),
            estimate: p.corrected.variance(),
            std_error: f64::NAN,
            oracle: f64::NAN,
            z: f64::NAN,
        });
    }
    rows
}

/// Samples of the non-Gaussian lower-bound estimator for each `m̃`, drawn
/// with common random numbers so that differences across `m̃` are paired.
#[derive(Debug, Clone)]
pub struct JensenCurve {
    pub likelihood: Likelihood,
    pub m_tildes: Vec<usize>,
    /// Exact expected log-likelihood under `q`.
    pub exact: f64,
    pub samples: Vec<Vec<f64>>,
    /// Estimator value with every index enumerated.
    pub enumerated: f64,
}

impl JensenCurve {
    pub fn stats(&self, k: usize) -> Stats {
        let mut s = Stats::default();
        for &v in &self.samples[k] {
            s.push(v);
        }
        s
    }

    /// Statistics of `bias(m̃_{k+1}) − bias(m̃_k)`.
    pub fn bias_step(&self, k: usize) -> Stats {
        let mut s = Stats::default();
        for (a, b) in self.samples[k].iter().zip(&self.samples[k + 1]) {
            // bias = exact − estimate
            s.push(a - b);
        }
        s
    }
}

pub fn jensen_curve(
    inst: &Instance,
    likelihood: Likelihood,
    m_tildes: &[usize],
    n_tilde: usize,
    reps: u64,
    quad_points: usize,
    seed: u64,
) -> Result<JensenCurve> {
    let y = match likelihood {
        Likelihood::Logistic => inst.signs(),
        _ => inst.y.clone(),
    };
    let site = SiteProjection::new(likelihood, &y, inst.expansion.hyper())?;
    let state = &inst.state;
    let exact = expected_log_lik(&site, &inst.phi()?, &state.dense_mu(), &state.covariance(), quad_points)?;
    let mut samples = vec![Vec::with_capacity(reps as usize); m_tildes.len()];
    for t in 0..reps {
        for (k, &mt) in m_tildes.iter().enumerate() {
            let b = inst.batch(seed, t, mt, n_tilde)?;
            let ctx = BatchContext::new(&b, &inst.expansion, &inst.x, false)?;
            samples[k].push(ctx.lower_bound(&site, state, quad_points)?.value);
        }
    }
    let full = sample_batch(RngKey::new(seed, 0), inst.n(), inst.m(), inst.m(), inst.n(), false, true)?;
    let enumerated = BatchContext::new(&full, &inst.expansion, &inst.x, false)?
        .lower_bound(&site, state, quad_points)?
        .value;
    Ok(JensenCurve {
        likelihood,
        m_tildes: m_tildes.to_vec(),
        exact,
        samples,
        enumerated,
    })
}

/// Only an estimator mean above the exact value counts against the bound,
/// so `z` is one-sided.
pub fn jensen_reports(curve: &JensenCurve) -> Vec<Row> {
    let name = curve.likelihood.name();
    let mut rows = Vec::new();
    for (k, mt) in curve.m_tildes.iter().enumerate() {
        let s = curve.stats(k);
        let mut row = Row::compared("jensen", format!("{name}[mtilde={mt}]"), &s, curve.exact);
        row.z = row.z.max(0.0);
        rows.push(row);
    }
    let gap = curve.enumerated - curve.exact;
    rows.push(Row {
        report: "jensen",
        term: format!("{name}[enumerated]"),
        estimate: curve.enumerated,
        std_error: 0.0,
        oracle: curve.exact,
        z: if gap.abs() <= 1e-10 * (1.0 + curve.exact.abs()) { 0.0 } else { f64::INFINITY },
    });
    rows
}
