use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use qsgp_core::elbo::Likelihood;
use qsgp_core::estimators::{estimate_l_mu, sample_batch, RngKey};
use qsgp_core::io::sinc_demo;
use qsgp_core::optimizer::closed_form_crr;
use qsgp_core::{BasisExpansion, Dataset, Hyperparameters, TrainConfig, Trainer};

fn data() -> Dataset {
    Dataset::from_raw(&sinc_demo(2000, 0.1, 4).unwrap(), Likelihood::Gaussian).unwrap()
}

fn hyper() -> Hyperparameters {
    Hyperparameters::new(&[0.5], 1.0, 0.1, 1.0).unwrap()
}

// The per-step cost should not move with the number of basis functions.
fn sgd_step(c: &mut Criterion) {
    let ds = data();
    let mut g = c.benchmark_group("sgd_step");
    for m in [10_000usize, 1_000_000] {
        let cfg = TrainConfig {
            m_tilde: 256,
            n_tilde: 128,
            n_bar: 0,
            iterations: u64::MAX,
            hyper_freeze_iters: Some(0),
            record_timing: false,
            ..TrainConfig::default()
        };
        let e = BasisExpansion::rff(m, 1, hyper()).unwrap();
        let mut tr = Trainer::new(&ds.x, &ds.y, e, cfg, None).unwrap();
        g.bench_function(BenchmarkId::from_parameter(m), |b| b.iter(|| tr.step().unwrap()));
    }
    g.finish();
}

fn sgd_step_with_cv(c: &mut Criterion) {
    let ds = data();
    let cfg = TrainConfig {
        m_tilde: 256,
        n_tilde: 128,
        n_bar: 500,
        iterations: u64::MAX,
        record_timing: false,
        ..TrainConfig::default()
    };
    let e = BasisExpansion::rff(10_000, 1, hyper()).unwrap();
    let mut tr = Trainer::new(&ds.x, &ds.y, e, cfg, None).unwrap();
    c.bench_function("sgd_step_cv_500", |b| b.iter(|| tr.step().unwrap()));
}

fn l_mu_estimate(c: &mut Criterion) {
    let ds = data();
    let e = BasisExpansion::rff(10_000, 1, hyper()).unwrap();
    let mu = vec![0.01; 10_000];
    let mut t = 0;
    c.bench_function("estimate_l_mu", |b| {
        b.iter(|| {
            t += 1;
            let batch = sample_batch(RngKey::new(0, t), 2000, 10_000, 256, 128, false, false).unwrap();
            estimate_l_mu(&batch, &e, &ds.x, &ds.y, 0.1, &mu).unwrap()
        })
    });
}

fn feature_block(c: &mut Criterion) {
    let ds = data();
    let e = BasisExpansion::rff(10_000, 1, hyper()).unwrap();
    let rows: Vec<usize> = (0..128).map(|i| i * 15).collect();
    let cols: Vec<usize> = (0..256).map(|i| i * 39).collect();
    c.bench_function("feature_block_128x256", |b| {
        b.iter(|| e.feature_block(black_box(&rows), &ds.x, black_box(&cols)).unwrap())
    });
}

fn closed_form(c: &mut Criterion) {
    c.bench_function("closed_form_crr", |b| {
        b.iter(|| closed_form_crr(black_box(3.2), black_box(0.1), black_box(1.5)).unwrap())
    });
}

criterion_group!(benches, sgd_step, sgd_step_with_cv, l_mu_estimate, feature_block, closed_form);
criterion_main!(benches);
