//! CLI orchestration: dataset generation, training, evaluation, ablation
//! grids, and diagnostics.

pub mod ablate;
pub mod config;
pub mod diagnose;
pub mod evalcmd;
pub mod train;

pub use ablate::{cell_distill_config, run_grid, GridConfig, GridResults};
pub use config::{OptimConfig, Role, RunConfig};
pub use diagnose::{diagnose, DiagnoseArtifacts};
pub use evalcmd::{eval_model, write_eval_artifacts};
pub use train::{train, RunReport};
