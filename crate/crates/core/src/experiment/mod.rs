//! Few-shot evaluation protocol, metrics and token diagnostics.

mod geometry;
mod metrics;
mod protocol;

pub use geometry::{
    class_scatter, export_tokens, token_geometry, token_geometry_report, write_tokens, ClassScatter, GeometryReport,
    GeometrySpec, Ratio, TokenPair,
};
pub use metrics::{accuracy, mean_std, rmse, MetricKind};
pub use protocol::{
    pretrain_for, run_protocol, run_seed, subset_hash, subset_indices, ExperimentPlan, MetricsReport, PipelineKind,
    RunRecord,
};
