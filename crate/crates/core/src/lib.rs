//! Transductive combination of Gaussian process experts.
//!
//! Exact GP experts are trained independently on subsets of the data (the
//! map phase) and their per-test-point Gaussian predictions are pooled (the
//! reduce phase) by one of four rules: the Bayesian committee machine, its
//! entropy-reweighted variant, the generalized product of experts, and the
//! diversified log opinion pool, which nudges the product-of-experts weights
//! along the gradient of a pairwise symmetric-KL diversity term.

pub mod error;
pub mod kernel;
pub mod gp;
pub mod optimize;
pub mod combine;
pub mod partition;
pub mod seeding;
pub mod metrics;
pub mod data;
pub mod ensemble;
pub mod harness;

pub use combine::{combine, CombinedPrediction, DlopConfig, Rule, WeightVector};
pub use data::{load_csv, standardize, synthetic_gp_data, Dataset};
pub use ensemble::{expert_predictions, train_ensemble, ExpertEnsemble};
pub use error::{Error, Result};
pub use harness::{run_benchmark, run_repeated, AggregateReport, RunConfig, RunReport, SyntheticConfig};
pub use gp::{fit, predict, ExpertPrediction, GpModel};
pub use kernel::{BaseKernel, HyperParams, KernelSpec};
pub use metrics::{smse, snlp, MetricsReport};
pub use optimize::{optimize_hypers, OptConfig};
pub use partition::{Scheme, SchemeConfig};
