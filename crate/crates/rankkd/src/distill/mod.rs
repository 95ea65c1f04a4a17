//! Teacher-to-student distillation losses: soft labels, masked feature
//! imitation, rank mimicking, and prediction-guided feature imitation.

pub mod classic;
pub mod pfi;
pub mod rank;
pub mod total;
pub mod types;

pub use classic::{
    ce_loss, feature_mse_loss, imitation_mask, soft_label_loss, FeatureAdapter,
};
pub use pfi::{feature_difference, pfi_loss, prediction_difference};
pub use rank::{
    extract_instance_scores, instance_score_vars, rank_distribution, rank_mimicking_loss,
    InstanceVars,
};
pub use total::{total_distill_loss, total_distill_loss_var};
pub use types::{
    DifferenceMap, DistillConfig, FeatureMaskMode, FeaturePyramid, InstanceAnchorScores,
    PfiForm, RankDistribution, RankMode,
};
