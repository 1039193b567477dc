use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use qsgp_core::elbo::DEFAULT_QUAD_POINTS;
use qsgp_core::io::{format_float, read_csv, sinc_demo, two_blobs, write_atomically};
use qsgp_core::predictor::{logistic_probability, predict_rows};
use qsgp_core::{
    rvm_prune, BasisExpansion, BasisKind, Dataset, Decay, EvalMetrics, Hyperparameters, Likelihood,
    MetricsRow, ModelArtifact, RawTable, RvmState, TrainConfig, Trainer,
};

use crate::args::{DiagnoseArgs, EvaluateArgs, KernelArg, PredictArgs, TrainArgs};
use crate::diagnose::{self, Instance};
use crate::{exit, CliError, CliResult};

const SINC_DEMO_N: usize = 500;
const SINC_DEMO_NOISE: f64 = 0.1;
const BLOBS_DEMO_N: usize = 400;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_atomically(p, |w| Ok(w.write_all(text.as_bytes())?))?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Data(format!("i/o error: {e}")))?;
        }
    }
    Ok(())
}

/// Training rows before standardization.
pub fn training_table(a: &TrainArgs) -> CliResult<RawTable> {
    use crate::args::Demo;
    let raw = match (a.demo, &a.data) {
        (Some(Demo::Sinc), _) => sinc_demo(SINC_DEMO_N, SINC_DEMO_NOISE, a.seed)?,
        (Some(Demo::Blobs), _) => two_blobs(BLOBS_DEMO_N, a.seed)?,
        (None, Some(path)) => read_csv(path, &a.csv.options().map_err(usage)?)?,
        (None, None) => return Err(usage("either --data or --demo is required")),
    };
    Ok(raw)
}

/// `m` rows spread evenly through the data, in order.
fn spread_rows(x: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(m, x.ncols(), |i, j| x[(i * n / m, j)])
}

fn initial_hyper(a: &TrainArgs, d: usize) -> CliResult<Hyperparameters> {
    let ls = match a.lengthscale.len() {
        1 => vec![a.lengthscale[0]; d],
        k if k == d => a.lengthscale.clone(),
        k => return Err(usage(format!("--lengthscale has {k} values but the data has {d} inputs"))),
    };
    Hyperparameters::new(&ls, a.signal_variance, a.noise_variance, a.laplace_scale)
        .map_err(|e| usage(e.to_string()))
}

/// Mini-batch sizes actually used, after clamping to the problem size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSizes {
    pub m_tilde: usize,
    pub n_tilde: usize,
    pub n_bar: usize,
    pub chevron_k: usize,
}

pub fn clamp_sizes(requested: BatchSizes, n: usize, m: usize) -> BatchSizes {
    BatchSizes {
        m_tilde: requested.m_tilde.min(m),
        n_tilde: requested.n_tilde.min(n),
        n_bar: requested.n_bar.min(n),
        chevron_k: requested.chevron_k.min(m),
    }
}

fn sizes_line(label: &str, s: BatchSizes) -> String {
    format!(
        "# {label}: m_tilde={} n_tilde={} n_bar={} chevron_k={}",
        s.m_tilde, s.n_tilde, s.n_bar, s.chevron_k
    )
}

pub const METRICS_HEADER: &str =
    "iteration,elbo_estimate,l_mu_est,l_sigma_est,l_const_est,lr_v,lr_h,step_wall_ms,rejected";

fn metrics_text(preamble: &[String], rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    for line in preamble {
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            format_float(r.elbo_estimate),
            format_float(r.l_mu_est),
            format_float(r.l_sigma_est),
            format_float(r.l_const_est),
            format_float(r.lr_v),
            format_float(r.lr_h),
            format_float(r.step_wall_ms),
            u8::from(r.rejected)
        );
    }
    s
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".checkpoint");
    out.with_file_name(name)
}

pub fn train(a: &TrainArgs) -> CliResult<u8> {
    let likelihood: Likelihood = a.likelihood.into();
    let rvm_kernel = a.kernel == KernelArg::Rvm;
    if rvm_kernel && likelihood != Likelihood::Gaussian {
        return Err(usage("--kernel rvm requires --likelihood gaussian"));
    }
    if a.log_every == 0 {
        return Err(usage("--log-every must be positive"));
    }
    let raw = training_table(a)?;
    let ds = Dataset::from_raw(&raw, likelihood)?;
    let (n, d) = (ds.n(), ds.d());
    let m = match (a.m, a.kernel) {
        (Some(m), _) => m,
        (None, KernelArg::Rff) => 1000,
        (None, KernelArg::Inducing) => n.min(1000),
        (None, KernelArg::Rvm) => n,
    };
    if m == 0 {
        return Err(usage("--m must be positive"));
    }
    if a.kernel != KernelArg::Rff && m > n {
        return Err(usage(format!("--m {m} exceeds the {n} training rows that can serve as centers")));
    }
    let hyper = initial_hyper(a, d)?;
    let (expansion, rvm) = match a.kernel {
        KernelArg::Rff => (BasisExpansion::rff(m, a.seed, hyper.clone())?, None),
        KernelArg::Inducing => (BasisExpansion::inducing(spread_rows(&ds.x, m), hyper.clone())?, None),
        KernelArg::Rvm => {
            let s0 = a.prior_precision;
            let rvm = RvmState::new(m, s0).map_err(|e| usage(e.to_string()))?;
            let e = BasisExpansion::dictionary_from_kernel(spread_rows(&ds.x, m), hyper.clone(), vec![s0; m])?;
            (e, Some(rvm))
        }
    };

    let requested = BatchSizes {
        m_tilde: a.mtilde,
        n_tilde: a.ntilde,
        n_bar: a.cv_rank,
        chevron_k: a.chevron_cols,
    };
    let sizes = clamp_sizes(requested, n, m);
    if sizes != requested {
        eprintln!(
            "note: batch sizes clamped to the problem (n={n}, m={m}): m̃={}, ñ={}, n̄={}, k={}",
            sizes.m_tilde, sizes.n_tilde, sizes.n_bar, sizes.chevron_k
        );
    }
    let decay = a.decay.unwrap_or(if rvm_kernel { 1.0 } else { 100.0 });
    if !(decay.is_finite() && decay >= 1.0) {
        return Err(usage("--decay must be at least 1"));
    }
    let cfg = TrainConfig {
        m_tilde: sizes.m_tilde,
        n_tilde: sizes.n_tilde,
        n_bar: sizes.n_bar,
        chevron_k: sizes.chevron_k,
        iterations: a.iters,
        lr_variational: a.lr_variational.unwrap_or(if rvm_kernel { 0.01 } else { 0.1 }),
        lr_hyper: a.lr_hyper,
        lr_precision: a.lr_precision,
        decay: if decay == 1.0 { Decay::Constant } else { Decay::Exponential { total: decay } },
        hyper_freeze_iters: a.freeze_hyper_iters,
        likelihood,
        quad_points: a.quad_points,
        seed: a.seed,
        log_every: a.log_every,
        diag_refresh: a.diag_refresh.unwrap_or(if rvm_kernel { 100 } else { 0 }),
        linear_cv: a.linear_cv,
        init_rows: a.init_rows,
        record_timing: !a.no_timing,
        ..TrainConfig::default()
    };
    cfg.validate_for(n, m).map_err(|e| usage(e.to_string()))?;

    let preamble = vec![
        format!(
            "# qsgp train: kernel={:?} likelihood={} n={n} d={d} m={m} iterations={} seed={}",
            a.kernel,
            likelihood.name(),
            cfg.iterations,
            cfg.seed
        )
        .to_lowercase(),
        sizes_line("requested", requested),
        sizes_line("effective", sizes),
    ];

    let mut trainer = Trainer::new(&ds.x, &ds.y, expansion, cfg.clone(), rvm)?;
    let mut rows = Vec::new();
    let mut failure = None;
    while trainer.iteration() < cfg.iterations {
        match trainer.step() {
            Ok(row) => {
                if row.iteration % cfg.log_every == 0 || row.iteration + 1 == cfg.iterations {
                    rows.push(row);
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if let Some(metrics) = &a.metrics {
        write_output(Some(metrics), &metrics_text(&preamble, &rows))?;
    }
    if let Some(e) = failure {
        let ckpt = checkpoint_path(&a.out);
        let saved = ModelArtifact::new(
            likelihood,
            trainer.expansion(),
            hyper,
            trainer.state().clone(),
            trainer.rvm().cloned(),
            ds.standardizer.clone(),
            cfg,
        )
        .and_then(|art| art.save(&ckpt));
        match saved {
            Ok(()) => eprintln!("qsgp: training stopped at step {}; state saved to {}", trainer.iteration(), ckpt.display()),
            Err(s) => eprintln!("qsgp: training stopped at step {} and the checkpoint failed: {s}", trainer.iteration()),
        }
        return Err(e.into());
    }

    let rejected = trainer.rejected_steps();
    let out = trainer.finish();
    let (expansion, state, rvm) = match &out.rvm {
        Some(r) => {
            let p = rvm_prune(r, &out.state, &out.expansion)?;
            if let Some(w) = &p.warning {
                eprintln!("warning: {w}");
            }
            eprintln!("relevance vectors: {} of {m}", p.keep.len());
            (p.expansion, p.state, Some(p.rvm))
        }
        None => (out.expansion, out.state, None),
    };
    let art = ModelArtifact::new(likelihood, &expansion, hyper, state, rvm, ds.standardizer.clone(), out.config)?;
    art.save(&a.out)?;
    if let Some(last) = rows.last() {
        eprintln!(
            "trained {} steps ({rejected} rejected); last ELBO estimate {:.6}",
            cfg.iterations, last.elbo_estimate
        );
    }
    Ok(exit::OK)
}

/// One output row of `predict`, in the units of the training targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub augmented_variance: Option<f64>,
    pub probability: Option<f64>,
}

fn quad_points(art: &ModelArtifact) -> usize {
    match art.config.quad_points {
        0 => DEFAULT_QUAD_POINTS,
        q => q,
    }
}

/// Predictions for raw (unstandardized) inputs.
pub fn predict_inputs(art: &ModelArtifact, x_raw: &DMatrix<f64>, include_noise: bool) -> CliResult<Vec<Prediction>> {
    let x = art.standardizer.transform_x(x_raw)?;
    let e = art.expansion()?;
    let regression = art.likelihood.is_regression();
    // augmentation treats the stored centers as the training inputs
    let augment = match art.kind {
        BasisKind::InducingPoint => art.centers.as_ref(),
        _ => None,
    };
    let preds = predict_rows(&art.state, &e, &x, include_noise && regression, augment)?;
    let st = &art.standardizer;
    let qp = quad_points(art);
    Ok(preds
        .iter()
        .map(|p| {
            if regression {
                Prediction {
                    mean: st.inverse_y(p.mean),
                    variance: st.inverse_variance(p.variance),
                    augmented_variance: p.augmented_variance.map(|v| st.inverse_variance(v)),
                    probability: None,
                }
            } else {
                Prediction {
                    mean: p.mean,
                    variance: p.variance,
                    augmented_variance: p.augmented_variance,
                    probability: Some(logistic_probability(p, qp)),
                }
            }
        })
        .collect())
}

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let aug = preds.first().is_some_and(|p| p.augmented_variance.is_some());
    let prob = preds.first().is_some_and(|p| p.probability.is_some());
    let mut s = String::from("mean,variance");
    if aug {
        s.push_str(",augmented_variance");
    }
    if prob {
        s.push_str(",probability");
    }
    s.push('\n');
    for p in preds {
        s.push_str(&format_float(p.mean));
        s.push(',');
        s.push_str(&format_float(p.variance));
        for v in [p.augmented_variance, p.probability].into_iter().flatten() {
            s.push(',');
            s.push_str(&format_float(v));
        }
        s.push('\n');
    }
    s
}

pub fn predict(a: &PredictArgs) -> CliResult<u8> {
    let art = ModelArtifact::load(&a.model)?;
    let raw = read_csv(&a.data, &a.csv.options().map_err(usage)?)?;
    let preds = predict_inputs(&art, &raw.x, a.include_noise)?;
    write_output(a.out.as_deref(), &predictions_csv(&preds))?;
    Ok(exit::OK)
}

/// Metrics on a labelled table, reported in the units of the raw targets.
pub fn evaluate_table(art: &ModelArtifact, raw: &RawTable) -> CliResult<EvalMetrics> {
    let ds = Dataset::with_standardizer(raw, art.likelihood, &art.standardizer)?;
    let e = art.expansion()?;
    let preds = predict_rows(&art.state, &e, &ds.x, false, None)?;
    let mut m = qsgp_core::evaluate(&preds, &ds.y, art.likelihood, &art.hyper, quad_points(art))?;
    if art.likelihood.is_regression() {
        // densities pick up a Jacobian of 1/y_scale when mapped back
        let s = art.standardizer.y_scale;
        m.rmse = m.rmse.map(|r| r * s);
        m.mnlp += s.ln();
    }
    Ok(m)
}

pub fn metrics_csv(m: &EvalMetrics) -> String {
    let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!("n,rmse,mnlp,accuracy\n{},{},{:.6},{}\n", m.n, f(m.rmse), m.mnlp, f(m.accuracy))
}

pub fn evaluate_cmd_output(a: &EvaluateArgs) -> CliResult<String> {
    let art = ModelArtifact::load(&a.model)?;
    let raw = read_csv(&a.data, &a.csv.options().map_err(usage)?)?;
    Ok(metrics_csv(&evaluate_table(&art, &raw)?))
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<u8> {
    write_output(None, &evaluate_cmd_output(a)?)?;
    Ok(exit::OK)
}

/// Rows, basis count, chevron width and batch sizes of the diagnostic instance.
const DIAG_N: usize = 20;
const DIAG_M: usize = 8;
const DIAG_K: usize = 2;
const DIAG_M_TILDE: usize = 3;
const DIAG_N_TILDE: usize = 4;
const Z_LIMIT: f64 = 5.0;

pub fn diagnostic_instance(a: &DiagnoseArgs) -> CliResult<Instance> {
    match &a.data {
        None => Ok(Instance::synthetic(DIAG_N, DIAG_M, 2, DIAG_K, a.seed)?),
        Some(path) => {
            let raw = read_csv(path, &a.csv.options().map_err(usage)?)?;
            let rows = raw.n().min(DIAG_N);
            let head = RawTable::new(raw.x.rows(0, rows).into_owned(), raw.y[..rows].to_vec())?;
            let ds = Dataset::from_raw(&head, Likelihood::Gaussian)?;
            let hyper = Hyperparameters::new(&vec![1.0; ds.d()], 1.0, 0.4, 0.8)?;
            Ok(Instance::from_data(ds.x, ds.y, hyper, DIAG_M, DIAG_K, a.seed)?)
        }
    }
}

pub fn diagnostic_rows(a: &DiagnoseArgs) -> CliResult<Vec<diagnose::Row>> {
    if a.replicates == 0 {
        return Err(usage("--replicates must be positive"));
    }
    if !a.no_sweep && a.sweep_replicates < 2 {
        return Err(usage("--sweep-replicates must be at least 2"));
    }
    let inst = diagnostic_instance(a)?;
    let n_tilde = DIAG_N_TILDE.min(inst.n());
    let mut rows = diagnose::estimator_reports(&inst, DIAG_M_TILDE, n_tilde, a.replicates, a.seed)?;
    let m = inst.m();
    let mut m_tildes = vec![1, m / 4, m / 2, m];
    m_tildes.dedup();
    for lik in [Likelihood::Logistic, Likelihood::Laplace] {
        let curve = diagnose::jensen_curve(&inst, lik, &m_tildes, n_tilde, a.replicates, DEFAULT_QUAD_POINTS, a.seed)?;
        rows.extend(diagnose::jensen_reports(&curve));
        for k in 0..m_tildes.len() - 1 {
            let s = curve.bias_step(k);
            rows.push(diagnose::Row {
                report: "jensen",
                term: format!("{}[bias_step={}->{}]", lik.name(), m_tildes[k], m_tildes[k + 1]),
                estimate: s.mean(),
                std_error: s.std_error(),
                oracle: 0.0,
                // only growth of the bias with m̃ is a failure
                z: s.z(0.0).max(0.0),
            });
        }
    }
    if !a.no_sweep {
        let sweep = diagnose::cv_sweep(&[0, 50, 200, 500], a.sweep_replicates, a.seed)?;
        rows.extend(diagnose::cv_reports(&sweep));
    }
    Ok(rows)
}

pub fn diagnose(a: &DiagnoseArgs) -> CliResult<u8> {
    let rows = diagnostic_rows(a)?;
    write_output(a.out.as_deref(), &diagnose::to_csv(&rows))?;
    let bad: Vec<&str> = rows.iter().filter(|r| r.failed(Z_LIMIT)).map(|r| r.term.as_str()).collect();
    if bad.is_empty() {
        Ok(exit::OK)
    } else {
        eprintln!("qsgp: |z| > {Z_LIMIT} for {}", bad.join(", "));
        Ok(exit::NUMERIC)
    }
}
