//! Configuration-driven experiments: dataset construction, training with
//! checkpointing, analysis passes and report bundles.

mod config;
mod dataset;
mod pipeline;
mod report;

pub use config::{
    geometric_schedule, AnalysisPlan, AnalyticTarget, CheckpointSpec, DataSource, DatasetSpec, ExperimentConfig,
    CONFIG_VERSION,
};
pub use dataset::{build_dataset, sample_bilinear, ExperimentData};
pub use pipeline::*;
pub use report::{build_report, write_report, FileEntry, ReportBundle, Seeds, MANIFEST_NAME};
