//! Network assembly, training loop, metrics, checkpoints and filter export.

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod metrics;
pub mod network;
pub mod runner;

pub use checkpoint::{Checkpoint, TrainingMeta};
pub use config::{ExperimentConfig, OptimizerChoice};
pub use metrics::EpochMetrics;
pub use network::{build_network, LayerSpec, Network, NetworkSpec, DEFAULT_GCNN};
pub use runner::{
    evaluate, run_paired_experiment, run_training, ExperimentData, PairedSummary, RunOutcome,
    TrainSettings, Trainer,
};
