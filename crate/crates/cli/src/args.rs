use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qsgp_core::{CsvOptions, Likelihood};

#[derive(Parser, Debug)]
#[command(name = "qsgp", version, about = "Quadruply stochastic sparse Gaussian processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit a model and write it to disk
    Train(TrainArgs),
    /// Write per-row predictive means and variances
    Predict(PredictArgs),
    /// Print RMSE, MNLP and accuracy on a labelled file
    Evaluate(EvaluateArgs),
    /// Check the stochastic estimators against exact oracles
    Diagnose(DiagnoseArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodArg {
    Gaussian,
    Laplace,
    Logistic,
}

impl From<LikelihoodArg> for Likelihood {
    fn from(l: LikelihoodArg) -> Self {
        match l {
            LikelihoodArg::Gaussian => Likelihood::Gaussian,
            LikelihoodArg::Laplace => Likelihood::Laplace,
            LikelihoodArg::Logistic => Likelihood::Logistic,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelArg {
    /// Random Fourier features of the squared-exponential kernel
    Rff,
    /// Kernel functions centred on training inputs
    Inducing,
    /// Relevance vector machine: one basis per training input with learned precisions
    Rvm,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Demo {
    /// 500 noisy draws of sin(x)/x on [-5, 5]
    Sinc,
    /// 400 points in two Gaussian clusters with 0/1 labels
    Blobs,
}

#[derive(Args, Debug, Clone)]
pub struct CsvArgs {
    /// The first line holds column names
    #[arg(long)]
    pub header: bool,
    /// Zero-based index of the target column (default: last)
    #[arg(long)]
    pub target_column: Option<usize>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

impl CsvArgs {
    pub fn options(&self) -> Result<CsvOptions, String> {
        if !self.delimiter.is_ascii() {
            return Err("the delimiter must be a single ASCII character".into());
        }
        Ok(CsvOptions {
            has_header: self.header,
            target_column: self.target_column,
            delimiter: self.delimiter as u8,
        })
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training CSV
    #[arg(long, required_unless_present = "demo", conflicts_with = "demo")]
    pub data: Option<PathBuf>,
    /// Train on a built-in synthetic dataset instead of a file
    #[arg(long, value_enum)]
    pub demo: Option<Demo>,
    #[command(flatten)]
    pub csv: CsvArgs,
    #[arg(long, value_enum, default_value_t = LikelihoodArg::Gaussian)]
    pub likelihood: LikelihoodArg,
    #[arg(long, value_enum, default_value_t = KernelArg::Rff)]
    pub kernel: KernelArg,
    /// Basis count (default: 1000 for rff, min(n, 1000) for inducing, n for rvm)
    #[arg(long)]
    pub m: Option<usize>,
    /// Basis functions sampled per step
    #[arg(long, default_value_t = 10_000)]
    pub mtilde: usize,
    /// Data rows sampled per step
    #[arg(long, default_value_t = 500)]
    pub ntilde: usize,
    /// Control-variate support rows; 0 disables
    #[arg(long, default_value_t = 500)]
    pub cv_rank: usize,
    /// Dense leading columns of the covariance factor
    #[arg(long, default_value_t = 10)]
    pub chevron_cols: usize,
    #[arg(long, default_value_t = 10_000)]
    pub iters: u64,
    /// Default: 0.01 for rvm, 0.1 otherwise
    #[arg(long)]
    pub lr_variational: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    pub lr_hyper: f64,
    /// Rate for the relevance vector precisions
    #[arg(long, default_value_t = 0.2)]
    pub lr_precision: f64,
    /// Overall learning-rate decay across training; 1 keeps rates constant
    /// (default: 1 for rvm, 100 otherwise)
    #[arg(long)]
    pub decay: Option<f64>,
    /// Steps before hyperparameters start moving (default: a tenth of --iters)
    #[arg(long)]
    pub freeze_hyper_iters: Option<u64>,
    /// Gauss-Hermite nodes for non-Gaussian likelihoods; 0 samples instead
    #[arg(long, default_value_t = 101)]
    pub quad_points: usize,
    /// Reset the diagonal tail in closed form every this many steps
    /// (default: 100 for rvm, never otherwise)
    #[arg(long)]
    pub diag_refresh: Option<u64>,
    /// Also apply the control variate for the linear term
    #[arg(long)]
    pub linear_cv: bool,
    /// Rows used to initialize the diagonal
    #[arg(long, default_value_t = 64)]
    pub init_rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lengthscale(s) in standardized input units, comma separated per dimension
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub lengthscale: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub signal_variance: f64,
    /// In standardized target units
    #[arg(long, default_value_t = 0.1)]
    pub noise_variance: f64,
    #[arg(long, default_value_t = 1.0)]
    pub laplace_scale: f64,
    /// Initial relevance vector precision
    #[arg(long, default_value_t = 1.0)]
    pub prior_precision: f64,
    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV to write
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Write zero step times so repeated runs give identical metrics files
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input CSV laid out like the training file; its target column is ignored
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub csv: CsvArgs,
    /// Add the observation noise to the variance
    #[arg(long)]
    pub include_noise: bool,
    /// Output CSV (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub csv: CsvArgs,
}

#[derive(Args, Debug, Clone)]
pub struct DiagnoseArgs {
    /// Mini-batches drawn per report
    #[arg(long, default_value_t = 100_000)]
    pub replicates: u64,
    /// Mini-batches per point of the control-variate sweep
    #[arg(long, default_value_t = 2_000)]
    pub sweep_replicates: u64,
    /// Skip the control-variate variance sweep
    #[arg(long)]
    pub no_sweep: bool,
    /// Build the instance from the first 20 rows of this CSV instead of synthetic data
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub csv: CsvArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}
