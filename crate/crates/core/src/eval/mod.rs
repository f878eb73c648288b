//! DSC / mIoU metrics, full-resolution prediction, reports and the
//! evaluation protocols (mixed multi-center, strategy comparison, held-out
//! centers).

mod metrics;
mod predict;
mod protocols;
mod report;

pub use metrics::{dsc, iou, overlap, Overlap};
pub use predict::{
    logits_to_mask, model_input, predict_full_res, predict_logits, predict_logits_from_embedding,
    ModelInput,
};
pub use protocols::{
    audit_disjointness, manifest_fingerprint, params_fingerprint, run_cross_dataset,
    run_strategy_comparison, ComparisonRow, CrossDatasetResult, DisjointnessAudit,
    StrategyComparison,
};
pub use report::{
    evaluate, evaluate_oracle, evaluate_samples, MetricsReport, MetricsRow, SampleMetrics, OVERALL,
};
