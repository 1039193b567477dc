//! Quadruply stochastic variational inference for sparse Gaussian processes
//! and relevance vector machines.
//!
//! Each training step subsamples data rows and basis functions twice, so its
//! cost is independent of both `n` and `m`.

pub mod elbo;
pub mod error;
pub mod estimators;
pub mod features;
pub mod io;
pub mod optimizer;
pub mod predictor;
pub mod state;
pub mod variance;

pub use elbo::{Likelihood, SiteProjection};
pub use error::{QsgpError, Result};
pub use estimators::{sample_batch, IndexBatch, RngKey, StochasticEstimate};
pub use features::{BasisExpansion, BasisKind, Hyperparameters};
pub use io::{CsvOptions, Dataset, ModelArtifact, RawTable, Standardizer};
pub use optimizer::{
    rvm_prune, train, Decay, MetricsRow, PrecisionGradient, PrunedModel, RvmState, TrainConfig, TrainOutcome,
    Trainer,
};
pub use predictor::{evaluate, predict, predict_augmented, EvalMetrics, PredictiveResult};
pub use state::VariationalState;
pub use variance::{ControlVariateState, CvTarget, LinearControlVariate};
