//! Confusion matrices, grouped mIoU, the joint-versus-incremental gap and
//! report emission.

mod metrics;
mod report;

pub use metrics::{confusion, delta, miou, ConfusionMatrix, Miou};
pub use report::{
    ablation_table, emit_report, read_rows_csv, text_table, write_ablation_csv, write_rows_csv, AblationRow,
    MetricsReport, ReportRow, StepMetrics, METRICS_CSV, METRICS_TXT, PER_CLASS_CSV,
};
