//! Fully-connected network engine: architecture, exact per-sample gradients,
//! L2 loss, and the training loop with learning-rate scheduling.

mod config;
mod data;
mod features;
mod model;
mod network;
mod train;

pub use config::{Activation, NetworkConfig, OptimizerConfig, OptimizerKind, Precision, Schedule};
pub use data::Dataset;
pub use features::{FeatureMap, FeatureModel};
pub use model::Model;
pub use network::{LayerShape, Network};
pub use train::{
    loss_and_residual, loss_gradient, run_training, run_training_with, train_step, Checkpoint,
    Optimizer, RunStatus, TraceRecord, TrainingPlan, TrainingTrace,
};
