//! Measurements behind the method's motivation: anchor-rank disagreement
//! between teacher and student, and the feature/prediction difference
//! mismatch, plus heatmap emission.

pub mod agreement;
pub mod heatmap;
pub mod inconsistency;

pub use agreement::{
    rank_csv_rows, top_anchor_agreement, AgreementReport, InstanceAgreement,
    RANK_CSV_HEADER,
};
pub use heatmap::{difference_heatmaps, write_heatmaps, write_pgm, Heatmap, LevelHeatmaps};
pub use inconsistency::{inconsistency_metrics, InconsistencyReport, LevelInconsistency};
