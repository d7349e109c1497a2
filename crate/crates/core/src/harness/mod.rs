//! Run orchestration: configuration, phased pipelines over a run
//! directory, reports and sweeps.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{DatasetSpec, LandscapeConfig, MembankConfig, ModelSpec, PretrainConfig, RunConfig};
pub use pipeline::{load_run_config, run_pipeline, EvalMetrics, Phase, Pipeline, RunLayout, RunManifest};
pub use report::{report, sweep, ReportTable};
