mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use qsgp_core::elbo::{exact_elbo, exact_gradients, exact_posterior, log_marginal_likelihood, Likelihood};
use qsgp_core::estimators::{estimate_l_const, estimate_l_mu, estimate_l_sigma, sample_batch, RngKey};
use qsgp_core::features::{BasisExpansion, Hyperparameters};
use qsgp_core::optimizer::*;
use qsgp_core::variance::CvTarget;
use rand::Rng;

/// Golden-section search on `(a c² − 2 log c)` comparing points through a
/// cancellation-free difference, so the bracket can shrink to roundoff.
fn golden_min(a: f64, mut lo: f64, mut hi: f64) -> f64 {
    let diff = |x1: f64, x2: f64| a * (x1 - x2) * (x1 + x2) - 2.0 * ((x1 - x2) / x2).ln_1p();
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    for _ in 0..300 {
        if diff(x1, x2) < 0.0 {
            hi = x2;
            x2 = x1;
            x1 = hi - g * (hi - lo);
        } else {
            lo = x1;
            x1 = x2;
            x2 = lo + g * (hi - lo);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn closed_form_matches_golden_section() {
    let mut r = rng(1);
    let mut cases: Vec<(f64, f64, f64)> = vec![(3.7, 0.9, 2.1), (3.0, 1.0, 1.0)];
    cases.extend((0..100).map(|_| (r.random_range(0.0..10.0), r.random_range(0.01..5.0), r.random_range(0.01..10.0))));
    for (phi2, s2, s) in cases {
        let c = closed_form_crr(phi2, s2, s).unwrap();
        let oracle = golden_min(phi2 / s2 + s, 1e-9, 100.0);
        assert!((c - oracle).abs() <= 1e-8, "({phi2}, {s2}, {s}): {c} vs {oracle}");
    }
}

fn dictionary(phi: DMatrix<f64>, s: Vec<f64>, noise: f64) -> BasisExpansion {
    let hyper = Hyperparameters::new(&[1.0], 1.0, noise, 1.0).unwrap();
    BasisExpansion::dictionary_from_matrix(phi, s, hyper).unwrap()
}

#[test]
fn initialization_uses_closed_form_diagonal() {
    let x = DMatrix::zeros(3, 1);
    let zero = dictionary(DMatrix::zeros(3, 2), vec![4.0, 0.25], 1.0);
    let cfg = TrainConfig {
        chevron_k: 1,
        ..TrainConfig::default()
    };
    let s = init_state(&zero, &x, &cfg).unwrap();
    assert!((s.c(0, 0).unwrap() - 0.5).abs() < 1e-15);
    assert!((s.c(1, 1).unwrap() - 2.0).abs() < 1e-15);
    assert!(s.mu().iter().all(|&v| v == 0.0));

    let ones = dictionary(DMatrix::from_element(3, 1, 1.0), vec![1.0], 1.0);
    let s = init_state(&ones, &x, &TrainConfig { chevron_k: 0, ..cfg }).unwrap();
    assert!((s.c(0, 0).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn initial_diagonal_is_stationary_for_the_exact_objective() {
    let inst = rff_instance(30, 12, 2, 5);
    let cfg = TrainConfig {
        chevron_k: 0,
        init_rows: 30,
        ..TrainConfig::default()
    };
    let state = init_state(&inst.expansion, &inst.x, &cfg).unwrap();
    let g = exact_gradients(&inst.phi(), &inst.s(), &inst.y_vec(), inst.noise, &state.dense_mu(), &state.dense_c())
        .unwrap();
    for r in 0..12 {
        assert!(g.l_sigma_c[(r, r)].abs() < 1e-10, "column {r}: {}", g.l_sigma_c[(r, r)]);
    }
}

#[test]
fn zero_mean_start_gives_zero_running_vectors() {
    let inst = rff_instance(50, 10, 1, 6);
    let cfg = TrainConfig {
        m_tilde: 4,
        n_tilde: 5,
        n_bar: 20,
        chevron_k: 2,
        iterations: 10,
        ..TrainConfig::default()
    };
    let tr = Trainer::new(&inst.x, &inst.y, inst.expansion.clone(), cfg, None).unwrap();
    let cv = tr.control_variate().unwrap();
    assert!(cv.running(CvTarget::Mean).unwrap().iter().all(|&v| v == 0.0));
}

fn conjugate_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        m_tilde: 10,
        n_tilde: 40,
        n_bar: 0,
        chevron_k: 10,
        iterations,
        hyper_freeze_iters: Some(iterations),
        full_batch: true,
        record_timing: false,
        ..TrainConfig::default()
    }
}

#[test]
fn conjugate_instance_converges_to_the_posterior() {
    let inst = rff_instance(40, 10, 1, 7);
    let (out, _) = train(&inst.x, &inst.y, inst.expansion.clone(), conjugate_config(5000), None).unwrap();
    let (phi, s, y) = (inst.phi(), inst.s(), inst.y_vec());
    let (mean, _) = exact_posterior(&phi, &s, &y, inst.noise).unwrap();
    let err = (out.state.dense_mu() - &mean).amax();
    assert!(err <= 1e-3, "mean error {err}");
    let elbo = exact_elbo(&phi, &s, &y, inst.noise, &out.state.dense_mu(), &out.state.dense_c())
        .unwrap()
        .elbo;
    let lml = log_marginal_likelihood(&phi, &s, &y, inst.noise).unwrap();
    assert!((elbo - lml).abs() <= 1e-3, "elbo {elbo} vs lml {lml}");
}

#[test]
fn stochastic_training_raises_the_exact_elbo() {
    let inst = rff_instance(200, 40, 1, 8);
    let cfg = TrainConfig {
        m_tilde: 10,
        n_tilde: 20,
        n_bar: 50,
        chevron_k: 3,
        iterations: 3000,
        record_timing: false,
        hyper_freeze_iters: Some(3000),
        ..TrainConfig::default()
    };
    let (phi, s, y) = (inst.phi(), inst.s(), inst.y_vec());
    let mut tr = Trainer::new(&inst.x, &inst.y, inst.expansion.clone(), cfg, None).unwrap();
    let elbo = |st: &VariationalState| exact_elbo(&phi, &s, &y, inst.noise, &st.dense_mu(), &st.dense_c()).unwrap().elbo;
    let mut trace = Vec::new();
    for t in 0..3000 {
        tr.step().unwrap();
        if t >= 500 && t % 100 == 0 {
            trace.push(elbo(tr.state()));
        }
    }
    let lml = log_marginal_likelihood(&phi, &s, &y, inst.noise).unwrap();
    let first = trace[0];
    let last = *trace.last().unwrap();
    assert!(last >= first, "{trace:?}");
    assert!(last <= lml + 1e-9);
    // the trailing half moves little compared with the remaining gap
    let tail = &trace[trace.len() / 2..];
    for w in tail.windows(2) {
        assert!(w[1] >= w[0] - 0.05 * (lml - first).abs(), "{tail:?}");
    }
}

#[test]
fn frozen_hyperparameters_stay_bit_identical() {
    let inst = rff_instance(60, 20, 2, 9);
    let cfg = TrainConfig {
        m_tilde: 5,
        n_tilde: 10,
        n_bar: 10,
        chevron_k: 2,
        iterations: 200,
        lr_hyper: 0.01,
        hyper_freeze_iters: Some(200),
        ..TrainConfig::default()
    };
    let before = inst.expansion.hyper().to_vec();
    let (out, _) = train(&inst.x, &inst.y, inst.expansion.clone(), cfg.clone(), None).unwrap();
    assert_eq!(before, out.expansion.hyper().to_vec());

    let moving = TrainConfig {
        hyper_freeze_iters: Some(100),
        ..cfg
    };
    let (out, rows) = train(&inst.x, &inst.y, inst.expansion.clone(), moving, None).unwrap();
    assert_ne!(before, out.expansion.hyper().to_vec());
    assert!(rows.iter().all(|r| (r.iteration < 100) == (r.lr_h == 0.0)));
}

#[test]
fn identical_seeds_reproduce_bit_identical_runs() {
    let inst = rff_instance(80, 16, 2, 10);
    let cfg = TrainConfig {
        m_tilde: 6,
        n_tilde: 8,
        n_bar: 16,
        chevron_k: 3,
        iterations: 300,
        lr_hyper: 1e-3,
        log_every: 7,
        record_timing: false,
        seed: 99,
        ..TrainConfig::default()
    };
    let (a, ra) = train(&inst.x, &inst.y, inst.expansion.clone(), cfg.clone(), None).unwrap();
    let (b, rb) = train(&inst.x, &inst.y, inst.expansion.clone(), cfg.clone(), None).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.state, b.state);
    assert_eq!(a.expansion.hyper(), b.expansion.hyper());
    let (c, _) = train(&inst.x, &inst.y, inst.expansion.clone(), TrainConfig { seed: 100, ..cfg }, None).unwrap();
    assert_ne!(a.state, c.state);
}

#[test]
fn zero_iterations_return_the_initialization() {
    let inst = rff_instance(30, 8, 1, 11);
    let cfg = TrainConfig {
        m_tilde: 4,
        n_tilde: 4,
        n_bar: 0,
        chevron_k: 2,
        iterations: 0,
        ..TrainConfig::default()
    };
    let (out, rows) = train(&inst.x, &inst.y, inst.expansion.clone(), cfg.clone(), None).unwrap();
    assert!(rows.is_empty());
    assert_eq!(out.state, init_state(&inst.expansion, &inst.x, &cfg).unwrap());
}

#[test]
fn zero_rate_leaves_parameters_unchanged() {
    let inst = rff_instance(30, 8, 1, 12);
    let cfg = TrainConfig {
        m_tilde: 4,
        n_tilde: 4,
        n_bar: 5,
        chevron_k: 2,
        iterations: 20,
        lr_variational: 0.0,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&inst.x, &inst.y, inst.expansion.clone(), cfg, None).unwrap();
    let before = tr.state().clone();
    for _ in 0..20 {
        tr.step().unwrap();
    }
    assert_eq!(before.mu(), tr.state().mu());
    assert_eq!(before.dense_c(), tr.state().dense_c());
    assert!(tr.state().version() > before.version());
}

#[test]
fn non_finite_gradients_are_rejected_and_penalized() {
    let mut inst = rff_instance(10, 4, 1, 13);
    inst.y[0] = f64::NAN;
    let cfg = TrainConfig {
        m_tilde: 4,
        n_tilde: 10,
        n_bar: 0,
        chevron_k: 1,
        iterations: 3,
        full_batch: true,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&inst.x, &inst.y, inst.expansion.clone(), cfg, None).unwrap();
    let before = tr.state().clone();
    let row = tr.step().unwrap();
    assert!(row.rejected);
    assert_eq!(before.mu(), tr.state().mu());
    assert!(tr.penalties().factor(Coord::Mu(0)) == 0.5);
    tr.step().unwrap();
    assert!(tr.penalties().factor(Coord::Mu(0)) == 0.25);
    assert_eq!(tr.rejected_steps(), 2);
}

#[test]
fn diagonal_entries_stay_positive() {
    let inst = rff_instance(50, 30, 2, 14);
    let cfg = TrainConfig {
        m_tilde: 8,
        n_tilde: 10,
        n_bar: 10,
        chevron_k: 4,
        iterations: 500,
        lr_variational: 0.5,
        ..TrainConfig::default()
    };
    let (out, _) = train(&inst.x, &inst.y, inst.expansion.clone(), cfg, None).unwrap();
    out.state.validate().unwrap();
    assert!((0..30).all(|r| out.state.c(r, r).unwrap() > 0.0));
}

#[test]
fn log_precision_gradient_matches_finite_differences() {
    let inst = dictionary_instance(8, 15);
    let state = random_state(8, 2, 16);
    let b = sample_batch(RngKey::new(0, 0), 8, 8, 8, 8, false, true).unwrap();
    let total = |e: &BasisExpansion| {
        let mut est = estimate_l_mu(&b, e, &inst.x, &inst.y, inst.noise, state.mu()).unwrap();
        est.add_scaled(&estimate_l_sigma(&b, e, &inst.x, inst.noise, &state).unwrap(), 1.0);
        est.add_scaled(&estimate_l_const(&b, e, &inst.y, inst.noise).unwrap(), 1.0);
        est
    };
    let est = total(&inst.expansion);
    let elbo = |e: &BasisExpansion| {
        exact_elbo(&e.dense_features(&inst.x).unwrap(), &e.dense_precision(), &inst.y_vec(), inst.noise, &state.dense_mu(), &state.dense_c())
            .unwrap()
            .elbo
    };
    let h: f64 = 1e-5;
    for i in 0..8 {
        let s = inst.expansion.precisions()[i];
        let mut up = inst.expansion.clone();
        up.set_precision(i, s * h.exp()).unwrap();
        let mut dn = inst.expansion.clone();
        dn.set_precision(i, s * (-h).exp()).unwrap();
        let fd = -2.0 * (elbo(&up) - elbo(&dn)) / (2.0 * h);
        assert!(rel_err(est.grad_log_precision[&i], fd) <= 1e-4, "basis {i}: {} vs {fd}", est.grad_log_precision[&i]);
    }
}

#[test]
fn sampled_precision_gradient_is_the_exact_partial() {
    let inst = dictionary_instance(7, 21);
    let state = random_state(7, 3, 22);
    let elbo = |e: &BasisExpansion| {
        exact_elbo(&e.dense_features(&inst.x).unwrap(), &e.dense_precision(), &inst.y_vec(), inst.noise, &state.dense_mu(), &state.dense_c())
            .unwrap()
            .elbo
    };
    let h: f64 = 1e-5;
    for i in 0..7 {
        let s = inst.expansion.precisions()[i];
        let mut up = inst.expansion.clone();
        up.set_precision(i, s * h.exp()).unwrap();
        let mut dn = inst.expansion.clone();
        dn.set_precision(i, s * (-h).exp()).unwrap();
        let fd = -(elbo(&up) - elbo(&dn)) / (2.0 * h);
        let g = log_precision_gradient(&state, s, i);
        assert!(rel_err(g, fd) <= 1e-4, "basis {i}: {g} vs {fd}");
    }
}

#[test]
fn unused_basis_pushes_its_precision_up() {
    let inst = dictionary_instance(6, 17);
    let mut c = DMatrix::identity(6, 6);
    c[(2, 2)] = 1e-6;
    let mut mu = vec![0.3; 6];
    mu[2] = 0.0;
    let state = VariationalState::from_dense(&mu, &c, 0).unwrap();
    let b = sample_batch(RngKey::new(0, 0), 6, 6, 6, 6, false, true).unwrap();
    let mut est = estimate_l_mu(&b, &inst.expansion, &inst.x, &inst.y, inst.noise, state.mu()).unwrap();
    est.add_scaled(&estimate_l_sigma(&b, &inst.expansion, &inst.x, inst.noise, &state).unwrap(), 1.0);
    est.add_scaled(&estimate_l_const(&b, &inst.expansion, &inst.y, inst.noise).unwrap(), 1.0);
    // the ELBO gradient is −½ of the summed estimate gradient
    assert!(-0.5 * est.grad_log_precision[&2] > 0.0);
}

fn rvm_fixture(s: &[f64]) -> (RvmState, VariationalState, BasisExpansion) {
    let m = s.len();
    let e = dictionary(DMatrix::from_fn(5, m, |i, j| (i + j) as f64 * 0.1), vec![1.0; m], 0.5);
    let state = random_state(m, 2, 18);
    (RvmState::from_precisions(s).unwrap(), state, e)
}

#[test]
fn pruning_applies_the_threshold() {
    let (rvm, state, e) = rvm_fixture(&[1.0, 1e5, 10.0, 1e7]);
    let p = rvm_prune(&rvm, &state, &e).unwrap();
    assert_eq!(p.keep, vec![0, 2]);
    assert!(p.warning.is_none());
    assert_eq!(p.state.m(), 2);
    assert_eq!(p.state.mu(), &[state.mu()[0], state.mu()[2]]);
    let c = state.dense_c();
    let pc = p.state.dense_c();
    assert_eq!(pc[(1, 0)], c[(2, 0)]);
    assert_eq!(pc[(1, 1)], c[(2, 2)]);
    assert_eq!(p.expansion.m(), 2);
    let s = p.expansion.precisions();
    assert!((s[0] - 1.0).abs() < 1e-12 && (s[1] - 10.0).abs() < 1e-12);

    let (rvm, state, e) = rvm_fixture(&[1.0; 4]);
    assert_eq!(rvm_prune(&rvm, &state, &e).unwrap().keep, vec![0, 1, 2, 3]);

    let (rvm, state, e) = rvm_fixture(&[1e9; 4]);
    let p = rvm_prune(&rvm, &state, &e).unwrap();
    assert!(p.keep.is_empty());
    assert!(p.warning.is_some());
}

#[test]
fn precision_learning_prunes_irrelevant_bases() {
    // targets depend on the first few inputs only through a smooth function,
    // so most kernel bases are redundant
    let n = 60;
    let mut r = rng(19);
    let x = DMatrix::from_fn(n, 1, |_, _| r.random_range(-3.0f64..3.0));
    let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() + 0.05 * r.random_range(-1.0..1.0)).collect();
    let hyper = Hyperparameters::new(&[1.0], 1.0, 0.01, 1.0).unwrap();
    let e = BasisExpansion::dictionary_from_kernel(x.clone(), hyper, vec![1.0; n]).unwrap();
    let cfg = TrainConfig {
        m_tilde: n,
        n_tilde: n,
        n_bar: 0,
        chevron_k: 5,
        iterations: 3000,
        full_batch: true,
        lr_hyper: 0.0,
        lr_precision: 0.2,
        decay: Decay::Constant,
        hyper_freeze_iters: Some(300),
        record_timing: false,
        ..TrainConfig::default()
    };
    let (out, _) = train(&x, &y, e, cfg, Some(RvmState::new(n, 1.0).unwrap())).unwrap();
    let survivors = out.rvm.as_ref().unwrap().survivors();
    assert!(survivors.len() < n / 2, "{} survivors", survivors.len());
}

#[test]
fn rvm_needs_a_dictionary_and_gaussian_sites() {
    let inst = rff_instance(20, 8, 1, 20);
    let cfg = TrainConfig {
        m_tilde: 4,
        n_tilde: 4,
        n_bar: 0,
        chevron_k: 1,
        iterations: 1,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(&inst.x, &inst.y, inst.expansion.clone(), cfg.clone(), Some(RvmState::new(8, 1.0).unwrap())).is_err());
    let d = dictionary_instance(10, 21);
    let logistic = TrainConfig {
        likelihood: Likelihood::Logistic,
        ..cfg
    };
    let y: Vec<f64> = d.y.iter().map(|v| v.signum()).collect();
    assert!(Trainer::new(&d.x, &y, d.expansion.clone(), logistic, Some(RvmState::new(10, 1.0).unwrap())).is_err());
}

#[test]
fn oversized_batches_are_rejected() {
    let inst = rff_instance(20, 8, 1, 22);
    let cfg = TrainConfig {
        m_tilde: 9,
        n_tilde: 4,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(&inst.x, &inst.y, inst.expansion.clone(), cfg, None).is_err());
}

#[test]
fn logistic_training_runs_and_improves() {
    let n = 100;
    let mut r = rng(23);
    let x = DMatrix::from_fn(n, 2, |i, _| if i % 2 == 0 { 1.5 } else { -1.5 } + r.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let hyper = Hyperparameters::new(&[1.0, 1.0], 1.0, 1.0, 1.0).unwrap();
    let e = BasisExpansion::rff(32, 3, hyper).unwrap();
    let cfg = TrainConfig {
        likelihood: Likelihood::Logistic,
        m_tilde: 16,
        n_tilde: 16,
        n_bar: 0,
        chevron_k: 0,
        iterations: 400,
        quad_points: 21,
        record_timing: false,
        log_every: 1,
        ..TrainConfig::default()
    };
    let (out, rows) = train(&x, &y, e, cfg, None).unwrap();
    let phi = out.expansion.dense_features(&x).unwrap();
    let f = phi * out.state.dense_mu();
    let acc = f.iter().zip(&y).filter(|(f, y)| f.signum() == **y).count() as f64 / n as f64;
    assert!(acc >= 0.9, "accuracy {acc}");
    let head: f64 = rows[..50].iter().map(|r| r.elbo_estimate).sum::<f64>() / 50.0;
    let tail: f64 = rows[rows.len() - 50..].iter().map(|r| r.elbo_estimate).sum::<f64>() / 50.0;
    assert!(tail > head);
    let _ = DVector::<f64>::zeros(1);
}
