mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use qsgp_core::estimators::{sample_batch, IndexBatch, RngKey};
use qsgp_core::features::{BasisExpansion, Hyperparameters};
use qsgp_core::state::VariationalState;
use qsgp_core::variance::*;
use qsgp_core::QsgpError;
use rand::Rng;

fn state_with_mu(mu: &[f64], k: usize) -> VariationalState {
    let m = mu.len();
    let mut s = VariationalState::new(m, k).unwrap();
    for (i, &v) in mu.iter().enumerate() {
        s.set_mu(i, v).unwrap();
    }
    s
}

/// `β·v_j̃ᵀΦ_{ℓ̃,j̃}ᵀΦ_{ℓ̃,ĩ}v_ĩ` computed directly from feature blocks.
fn quadratic_term(b: &IndexBatch, e: &BasisExpansion, x: &DMatrix<f64>, s2: f64, v: &[f64]) -> f64 {
    let a = e.feature_block(&b.l_tilde, x, &b.i_tilde).unwrap();
    let bb = e.feature_block(&b.l_tilde, x, &b.j_tilde).unwrap();
    let vi = DVector::from_iterator(b.i_tilde.len(), b.i_tilde.iter().map(|&i| v[i]));
    let vj = DVector::from_iterator(b.j_tilde.len(), b.j_tilde.iter().map(|&j| v[j]));
    let (n, m, mt, nt) = (b.n as f64, b.m as f64, b.m_tilde() as f64, b.n_tilde() as f64);
    n * m * m / (s2 * nt * mt * mt) * (bb * vj).dot(&(a * vi))
}

fn direct_running(e: &BasisExpansion, x: &DMatrix<f64>, p: &[usize], v: &[f64]) -> Vec<f64> {
    let all: Vec<usize> = (0..e.m()).collect();
    let phi = e.feature_block(p, x, &all).unwrap();
    (phi * DVector::from_column_slice(v)).iter().copied().collect()
}

#[test]
fn zero_vector_gives_zero_correction() {
    let inst = rff_instance(30, 10, 2, 1);
    let state = VariationalState::new(10, 0).unwrap();
    let p = draw_support(30, 8, 2).unwrap();
    let cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, p).unwrap();
    assert!(cv.running(CvTarget::Mean).unwrap().iter().all(|&a| a == 0.0));
    let b = sample_batch(RngKey::new(3, 0), 30, 10, 4, 5, false, false).unwrap();
    let est = cv_quadratic_correction(&b, &cv, &inst.x, inst.noise, &state, CvTarget::Mean).unwrap();
    assert_eq!(est.value, 0.0);
    assert!(est.grad_mu.values().all(|&g| g == 0.0));
}

#[test]
fn identical_rows_remove_all_sampling_variance() {
    let n = 25;
    let m = 12;
    let hyper = Hyperparameters::new(&[1.0], 1.0, 0.5, 1.0).unwrap();
    let e = BasisExpansion::rff(m, 4, hyper).unwrap();
    let x = DMatrix::from_element(n, 1, 0.37);
    let mut r = rng(9);
    let mu: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let state = state_with_mu(&mu, 0);
    let cv = ControlVariateState::quadratic(&e, &x, &state, draw_support(n, 6, 1).unwrap()).unwrap();
    let phi = e.features_all(&[0.37]).unwrap();
    let fv: f64 = phi.iter().zip(&mu).map(|(a, b)| a * b).sum();
    let expected = n as f64 / 0.5 * fv * fv;
    for t in 0..200 {
        let b = sample_batch(RngKey::new(5, t), n, m, 3, 4, false, false).unwrap();
        let term = quadratic_term(&b, &e, &x, 0.5, &mu);
        let corr = cv_quadratic_correction(&b, &cv, &x, 0.5, &state, CvTarget::Mean).unwrap();
        assert!(rel_err(term + corr.value, expected) < 1e-9);
    }
}

#[test]
fn quadratic_correction_has_zero_mean() {
    let (n, m) = (200, 50);
    let inst = rff_instance(n, m, 2, 11);
    let state = random_state(m, 3, 12);
    let cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, draw_support(n, 50, 13).unwrap())
        .unwrap();
    for target in [CvTarget::Mean, CvTarget::Column(0), CvTarget::Column(2)] {
        let mut value = Stats::default();
        let mut grads: Vec<Stats> = vec![Stats::default(); m];
        let reps = 100_000;
        for t in 0..reps {
            let b = sample_batch(RngKey::new(14, t), n, m, 5, 1, false, false).unwrap();
            let est = cv_quadratic_correction(&b, &cv, &inst.x, inst.noise, &state, target).unwrap();
            value.push(est.value);
            let mut dense = vec![0.0; m];
            for (&i, &g) in &est.grad_mu {
                dense[i] += g;
            }
            for (&(i, _), &g) in &est.grad_c {
                dense[i] += g;
            }
            for (s, g) in grads.iter_mut().zip(dense) {
                s.push(g);
            }
        }
        assert!(value.z(0.0) < 4.0, "{target:?}: value z = {}", value.z(0.0));
        let worst = grads.iter().map(|s| s.z(0.0)).fold(0.0, f64::max);
        // 50 simultaneous comparisons
        assert!(worst < 4.5, "{target:?}: worst gradient z = {worst}");
    }
}

#[test]
fn running_vectors_track_direct_recomputation() {
    let (n, m) = (100, 40);
    let inst = rff_instance(n, m, 3, 21);
    let mut state = random_state(m, 2, 22);
    let p = draw_support(n, 20, 23).unwrap();
    let mut cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, p.clone()).unwrap();
    let mut r = rng(24);
    for _ in 0..500 {
        let k = r.random_range(1..6);
        let touched: Vec<usize> = (0..k).map(|_| r.random_range(0..m)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let old: Vec<f64> = touched.iter().map(|&i| state.mu()[i]).collect();
        let new: Vec<f64> = old.iter().map(|v| v + r.random_range(-0.5..0.5)).collect();
        for (&i, &v) in touched.iter().zip(&new) {
            state.set_mu(i, v).unwrap();
        }
        cv_update_running(&mut cv, &inst.x, CvTarget::Mean, &touched, &old, &new).unwrap();

        let touched: Vec<usize> = touched.into_iter().filter(|&i| i > 1).collect();
        let old: Vec<f64> = touched.iter().map(|&i| state.c(i, 1).unwrap()).collect();
        let new: Vec<f64> = old.iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
        for (&i, &v) in touched.iter().zip(&new) {
            state.set_c(i, 1, v).unwrap();
        }
        cv_update_running(&mut cv, &inst.x, CvTarget::Column(1), &touched, &old, &new).unwrap();
        cv.set_version(state.version());
    }
    let direct = direct_running(&inst.expansion, &inst.x, &p, state.mu());
    let err = cv
        .running(CvTarget::Mean)
        .unwrap()
        .iter()
        .zip(&direct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-9, "max abs error {err}");

    let col: Vec<f64> = (0..m).map(|i| state.c(i, 1).unwrap()).collect();
    let direct = direct_running(&inst.expansion, &inst.x, &p, &col);
    let err = cv
        .running(CvTarget::Column(1))
        .unwrap()
        .iter()
        .zip(&direct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-9, "column max abs error {err}");
}

#[test]
fn null_update_and_misaligned_update() {
    let inst = rff_instance(20, 8, 1, 31);
    let state = random_state(8, 0, 32);
    let mut cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, draw_support(20, 5, 0).unwrap())
        .unwrap();
    let before = cv.running(CvTarget::Mean).unwrap().to_vec();
    cv_update_running(&mut cv, &inst.x, CvTarget::Mean, &[1, 3], &[0.2, 0.4], &[0.2, 0.4]).unwrap();
    assert_eq!(before, cv.running(CvTarget::Mean).unwrap());
    let err = cv_update_running(&mut cv, &inst.x, CvTarget::Mean, &[1, 3], &[0.2], &[0.2, 0.4]).unwrap_err();
    assert!(matches!(err, QsgpError::InvalidArgument(_)));
}

#[test]
fn stale_running_vector_is_rejected() {
    let inst = rff_instance(20, 8, 1, 33);
    let mut state = random_state(8, 1, 34);
    let cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, draw_support(20, 5, 0).unwrap())
        .unwrap();
    state.set_mu(0, 1.5).unwrap();
    let b = sample_batch(RngKey::new(1, 0), 20, 8, 3, 3, false, false).unwrap();
    let err = cv_quadratic_correction(&b, &cv, &inst.x, inst.noise, &state, CvTarget::Mean).unwrap_err();
    assert!(matches!(err, QsgpError::InvalidState(_)));
}

#[test]
fn sparse_gradient_scaling_is_unbiased() {
    let (n, m) = (40, 30);
    let inst = rff_instance(n, m, 2, 41);
    let state = random_state(m, 0, 42);
    let p = draw_support(n, 10, 43).unwrap();
    let cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, p.clone()).unwrap();
    let a = DVector::from_column_slice(cv.running(CvTarget::Mean).unwrap());
    let all: Vec<usize> = (0..m).collect();
    let phi_p = inst.expansion.feature_block(&p, &inst.x, &all).unwrap();
    let scale = n as f64 / (inst.noise * p.len() as f64);
    let dense = phi_p.transpose() * &a * (2.0 * scale);

    let (value, full) = cv_expectation_with_sparse_grad_scaling(&cv, &inst.x, inst.noise, &all).unwrap();
    assert!(rel_err(value, scale * a.dot(&a)) < 1e-12);
    for i in 0..m {
        assert!(rel_err(full[&i], dense[i]) < 1e-10);
    }

    let mut r = rng(44);
    let mut stats = vec![Stats::default(); m];
    for _ in 0..100_000 {
        let touched: Vec<usize> = (0..6).map(|_| r.random_range(0..m)).collect();
        let (_, g) = cv_expectation_with_sparse_grad_scaling(&cv, &inst.x, inst.noise, &touched).unwrap();
        for (i, s) in stats.iter_mut().enumerate() {
            s.push(g.get(&i).copied().unwrap_or(0.0));
        }
    }
    for (i, s) in stats.iter().enumerate() {
        assert!(s.z(dense[i]) < 4.5, "entry {i}: z = {}", s.z(dense[i]));
    }
}

#[test]
fn zero_running_vector_gives_zero_expectation() {
    let inst = rff_instance(20, 8, 1, 45);
    let state = VariationalState::new(8, 0).unwrap();
    let cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, draw_support(20, 5, 0).unwrap())
        .unwrap();
    let (v, g) = cv_expectation_with_sparse_grad_scaling(&cv, &inst.x, inst.noise, &[0, 4]).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.values().all(|&x| x == 0.0));
    assert!(cv_expectation_with_sparse_grad_scaling(&cv, &inst.x, inst.noise, &[]).is_err());
}

/// `γ·v_j̃ᵀS_{j̃,ĩ}v_ĩ` for an inducing expansion.
fn s_term(b: &IndexBatch, e: &BasisExpansion, v: &[f64]) -> f64 {
    let s = e.prior_precision_block(&b.j_tilde, &b.i_tilde).unwrap();
    let vi = DVector::from_iterator(b.i_tilde.len(), b.i_tilde.iter().map(|&i| v[i]));
    let vj = DVector::from_iterator(b.j_tilde.len(), b.j_tilde.iter().map(|&j| v[j]));
    let g = (b.m as f64 / b.m_tilde() as f64).powi(2);
    g * vj.dot(&(s * vi))
}

#[test]
fn nystrom_reduces_s_term_variance() {
    let (n, m) = (150, 150);
    let inst = inducing_instance(n, m, 51);
    let centers = inst.expansion.centers().unwrap().clone();
    let state = random_state(m, 0, 52);
    let u = centers.rows(0, 30).into_owned();
    let cv = ControlVariateState::nystrom(&inst.expansion, u, &state).unwrap();
    let (mut plain, mut corrected, mut corr) = (Stats::default(), Stats::default(), Stats::default());
    for t in 0..10_000 {
        let b = sample_batch(RngKey::new(53, t), n, m, 10, 1, false, false).unwrap();
        let s = s_term(&b, &inst.expansion, state.mu());
        let c = cv_nystrom_correction(&b, &cv, &state, CvTarget::Mean).unwrap();
        plain.push(s);
        corrected.push(s + c.value);
        corr.push(c.value);
    }
    assert!(corr.z(0.0) < 4.0, "z = {}", corr.z(0.0));
    assert!(
        corrected.variance() <= plain.variance(),
        "{} > {}",
        corrected.variance(),
        plain.variance()
    );
}

#[test]
fn nystrom_with_full_support_is_exact() {
    let m = 40;
    let inst = inducing_instance(60, m, 54);
    let centers = inst.expansion.centers().unwrap().clone();
    let state = random_state(m, 0, 55);
    let cv = ControlVariateState::nystrom(&inst.expansion, centers, &state).unwrap();
    let s = inst.s();
    let mu = state.dense_mu();
    let exact = mu.dot(&(&s * &mu));
    for t in 0..50 {
        let b = sample_batch(RngKey::new(56, t), 60, m, 7, 1, false, false).unwrap();
        let total = s_term(&b, &inst.expansion, state.mu())
            + cv_nystrom_correction(&b, &cv, &state, CvTarget::Mean).unwrap().value;
        assert!(rel_err(total, exact) < 1e-5, "{total} vs {exact}");
    }
}

#[test]
fn nystrom_requires_inducing_points() {
    let inst = rff_instance(20, 8, 1, 57);
    let state = VariationalState::new(8, 0).unwrap();
    let err = ControlVariateState::nystrom(&inst.expansion, DMatrix::zeros(3, 1), &state).unwrap_err();
    assert!(matches!(err, QsgpError::Unsupported(_)));
}

#[test]
fn linear_correction_contract() {
    let (n, m) = (100, 40);
    let inst = rff_instance(n, m, 2, 61);
    let hl = inst.expansion.hyper().len();

    let zero = VariationalState::new(m, 0).unwrap();
    let cv0 = LinearControlVariate::new(&inst.expansion, &inst.x, &inst.y, &zero).unwrap();
    let b = sample_batch(RngKey::new(62, 0), n, m, 8, 4, false, false).unwrap();
    assert_eq!(cv_linear_correction(&b, Some(&cv0), inst.noise, &zero, hl).unwrap().value, 0.0);
    assert!(matches!(
        cv_linear_correction(&b, None, inst.noise, &zero, hl).unwrap_err(),
        QsgpError::Unsupported(_)
    ));

    let state = random_state(m, 0, 63);
    let cv = LinearControlVariate::new(&inst.expansion, &inst.x, &inst.y, &state).unwrap();
    let phi = inst.phi();
    let b_oracle = phi.transpose() * inst.y_vec();
    for i in 0..m {
        assert!(rel_err(cv.b()[i], b_oracle[i]) < 1e-12);
    }
    let full = sample_batch(RngKey::new(0, 0), n, m, m, n, false, true).unwrap();
    let v = cv_linear_correction(&full, Some(&cv), inst.noise, &state, hl).unwrap().value;
    assert!(v.abs() < 1e-10, "{v}");

    let mut stats = Stats::default();
    for t in 0..100_000 {
        let b = sample_batch(RngKey::new(64, t), n, m, 5, 1, false, false).unwrap();
        stats.push(cv_linear_correction(&b, Some(&cv), inst.noise, &state, hl).unwrap().value);
    }
    assert!(stats.z(0.0) < 4.0, "z = {}", stats.z(0.0));
}

#[test]
fn frozen_features_keep_zero_mean_after_hyper_change() {
    let (n, m) = (60, 20);
    let inst = rff_instance(n, m, 1, 71);
    let state = random_state(m, 0, 72);
    let cv = ControlVariateState::quadratic(&inst.expansion, &inst.x, &state, draw_support(n, 15, 73).unwrap())
        .unwrap();
    let mut moved = inst.expansion.clone();
    moved
        .set_hyper(Hyperparameters::new(&[0.4], 2.0, 0.4, 0.8).unwrap())
        .unwrap();
    assert_eq!(cv.frozen_expansion().hyper().lengthscale(0), 1.3);
    let mut stats = Stats::default();
    for t in 0..50_000 {
        let b = sample_batch(RngKey::new(74, t), n, m, 4, 1, false, false).unwrap();
        stats.push(cv_quadratic_correction(&b, &cv, &inst.x, inst.noise, &state, CvTarget::Mean).unwrap().value);
    }
    assert!(stats.z(0.0) < 4.0);
}

/// Paired variance comparison across support sizes on one batch stream.
pub fn variance_sweep(n_bars: &[usize], reps: u64) -> Vec<f64> {
    let (n, m) = (2000, 500);
    let mut r = rng(81);
    let x = DMatrix::from_fn(n, 1, |_, _| r.random_range(-1.0..1.0));
    let hyper = Hyperparameters::new(&[2.0], 1.0, 0.1, 1.0).unwrap();
    let e = BasisExpansion::rff(m, 82, hyper).unwrap();
    let mu: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
    let state = state_with_mu(&mu, 0);
    let cvs: Vec<Option<ControlVariateState>> = n_bars
        .iter()
        .map(|&nb| (nb > 0).then(|| ControlVariateState::quadratic(&e, &x, &state, draw_support(n, nb, 83).unwrap()).unwrap()))
        .collect();
    let mut stats = vec![Stats::default(); n_bars.len()];
    for t in 0..reps {
        let b = sample_batch(RngKey::new(84, t), n, m, 50, 50, false, false).unwrap();
        let term = quadratic_term(&b, &e, &x, 0.1, &mu);
        for (cv, s) in cvs.iter().zip(stats.iter_mut()) {
            let c = match cv {
                Some(cv) => cv_quadratic_correction(&b, cv, &x, 0.1, &state, CvTarget::Mean).unwrap().value,
                None => 0.0,
            };
            s.push(term + c);
        }
    }
    stats.iter().map(|s| s.variance()).collect()
}

#[test]
fn variance_decreases_with_support_size() {
    let v = variance_sweep(&[0, 50, 200, 500], 3000);
    assert!(v.windows(2).all(|w| w[1] <= w[0]), "{v:?}");
    assert!(v[3] <= 0.5 * v[0], "{v:?}");
}
