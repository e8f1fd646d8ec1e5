//! Run orchestration: configuration schema, per-run directories,
//! manifests, metrics streams, and the command pipelines the CLI
//! delegates to.

pub mod config;
pub mod manifest;
pub mod metrics;
pub mod pipeline;

pub use config::{RunConfig, RunDir, ENV_PREFIX};
pub use manifest::{ArtifactRef, RunManifest, RunStatus, StageRecord};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use pipeline::{
    cmd_ablate, cmd_eval, cmd_split, cmd_sweep_lambda, cmd_train_generator, cmd_train_robust,
    GeneratorSource,
};
