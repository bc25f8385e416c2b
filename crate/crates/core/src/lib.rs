//! Minimum-width estimation for the hidden fully connected layers of a
//! trained network.
//!
//! A hidden layer's output is projected onto its leading singular
//! directions by a truncated-SVD autoencoder. The smallest truncation level
//! that leaves the network's predictions statistically equivalent to those of
//! an independently trained peer, found by bisection over a cross-validated
//! ensemble, estimates how many neurons the layer actually needs.
//!
//! ```no_run
//! use minwidth::{estimate_min_neurons, Architecture, Metric, SearchConfig, TrainSchedule, Loss};
//! # fn run(data: &minwidth::Dataset, arch: &Architecture) -> minwidth::Result<()> {
//! let config = SearchConfig::new(Metric::Accuracy, TrainSchedule::constant(Loss::CrossEntropy));
//! let report = estimate_min_neurons(arch, data, &config)?;
//! for layer in &report.per_layer {
//!     println!("layer {}: {} of {} neurons", layer.layer, layer.m_final, layer.width);
//! }
//! # Ok(()) }
//! ```

pub mod data;
pub mod equiv;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod nn;
pub mod probe;
pub mod report;
pub mod search;

pub use data::{load_csv, load_idx, make_folds, Dataset, FoldPlan, Task};
pub use equiv::{metric_eval, threshold_q0, worst_q, worst_q_from_predictions, Metric};
pub use error::{Error, Result};
pub use exec::{derive_seed, Exec};
pub use linalg::{thin_svd, Matrix, SvdFactors};
pub use nn::{train, Activation, Architecture, LayerSpec, Loss, Mode, Network, TrainOutcome, TrainSchedule};
pub use probe::{build_autoencoder, ProbedNetwork, SvdAutoencoder};
pub use search::{
    bisect_layer_width, bisect_layer_width_with, bisect_min_width, cross_validate_train, ensemble_from_networks, estimate_min_neurons,
    estimate_with_ensemble, verify_retrain, Ensemble, EstimateReport, ProbedFold, SearchConfig, VerificationReport,
};
