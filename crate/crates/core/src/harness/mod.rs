//! Training, evaluation, experiments and gradient verification.

pub mod experiments;
pub mod gradsuite;
pub mod metrics;
pub mod probe;
pub mod train;

pub use experiments::{ablate, noise_experiment, AblationRow, NoiseReport, RunReport};
pub use metrics::Metrics;
pub use train::{evaluate, train, MetricsReport, TrainConfig, Trained};
