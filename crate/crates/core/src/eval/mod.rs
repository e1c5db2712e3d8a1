//! Shape detection, overlap metrics and the component ablation sweep.

mod ablation;
mod detect;
mod metrics;

pub use ablation::{
    parse_runs_csv, run_ablation, run_cell, score_image, summarize, AblationPlan, AblationReport,
    AblationRow, ImageMetrics, RowSummary, RunRecord, Scenario, Stat, RUNS_CSV_HEADER,
    SUMMARY_CSV_HEADER,
};
pub use detect::{
    connected_components, detect_shapes, dual_object_success, Detection, DETECTION_THRESHOLD,
    FOREGROUND_LEVEL, MIN_COMPONENT_PIXELS,
};
pub use metrics::{condition_edge_agreement, edge_agreement_from, iou};
