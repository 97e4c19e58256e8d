//! Experiment plumbing: data, configuration, optimizers, training loops,
//! metrics output and the moment checks behind `verify-gradient`.

pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;
pub mod verify;

pub use config::{Algorithm, DataSource, OptimizerConfig, OptimizerKind, PrivacySpec, RunConfig};
pub use data::{load_mnist_idx, synth_dataset, Dataset};
pub use metrics::{emit_metrics, parse_metrics, write_metrics, MetricsRow, HEADER};
pub use train::{accuracy, train, train_dp_sgd, train_dp_ulr, StepRecord, TrainOutcome};
pub use verify::{verify_gradient, GradientCheck, LayerCheck};
