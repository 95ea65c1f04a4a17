//! Ablation grid: loss combinations x seeds, with mean +/- std mAP per cell.

use crate::distill::types::{DistillConfig, FeatureMaskMode, PfiForm, RankMode};
use crate::error::{Error, Result};
use crate::harness::config::{OptimConfig, Role, RunConfig};
use crate::harness::train::{train, RunReport};
use std::path::PathBuf;

/// Named loss combinations mirroring the compared methods.
pub const KNOWN_CELLS: [&str; 10] = [
    "baseline",
    "soft_label",
    "mse_whole",
    "mse_positive",
    "mse_negative",
    "mse_gt",
    "rm_cls",
    "rm",
    "pfi",
    "rm_pfi",
];

pub fn cell_distill_config(cell: &str) -> Result<DistillConfig> {
    let off = DistillConfig {
        alpha: 0.0,
        beta: 0.0,
        soft_label_weight: 0.0,
        ..DistillConfig::default()
    };
    let mask = |m: FeatureMaskMode| DistillConfig {
        beta: 1.5,
        feature_mask: m,
        ..off.clone()
    };
    Ok(match cell {
        "baseline" => off.clone(),
        "soft_label" => DistillConfig {
            soft_label_weight: 1.0,
            ..off.clone()
        },
        "mse_whole" => mask(FeatureMaskMode::Whole),
        "mse_positive" => mask(FeatureMaskMode::Positive),
        "mse_negative" => mask(FeatureMaskMode::Negative),
        "mse_gt" => mask(FeatureMaskMode::Gt),
        "rm_cls" => DistillConfig {
            alpha: 4.0,
            rank_mode: RankMode::Cls,
            ..off.clone()
        },
        "rm" => DistillConfig {
            alpha: 4.0,
            rank_mode: RankMode::ClsLoc,
            ..off.clone()
        },
        "pfi" => mask(FeatureMaskMode::Pfi),
        "pfi_linear" => DistillConfig {
            pfi_form: PfiForm::Linear,
            ..mask(FeatureMaskMode::Pfi)
        },
        "rm_pfi" => DistillConfig {
            alpha: 4.0,
            beta: 1.5,
            feature_mask: FeatureMaskMode::Pfi,
            ..off
        },
        other => {
            return Err(Error::Config(format!(
                "unknown grid cell {other:?}; known: {KNOWN_CELLS:?} + pfi_linear"
            )))
        }
    })
}

#[derive(Clone, Debug)]
pub struct GridConfig {
    pub cells: Vec<String>,
    pub seeds: Vec<u64>,
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub teacher: PathBuf,
    pub out: PathBuf,
    pub optimizer: OptimConfig,
    pub student_width: usize,
}

impl GridConfig {
    pub fn parse(text: &str) -> Result<GridConfig> {
        let mut cells = Vec::new();
        let mut seeds = Vec::new();
        let (mut train_dir, mut val_dir) = (None, None);
        let (mut teacher, mut out) = (None, None);
        let mut optimizer = OptimConfig::default();
        let mut student_width = 16usize;
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Config(format!("line {}: {m}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match (section.as_str(), key) {
                ("grid", "cells") => {
                    cells = value.split(',').map(|c| c.trim().to_string()).collect()
                }
                ("grid", "seeds") => {
                    seeds = value
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| bad(format!("bad seed {s:?}")))
                        })
                        .collect::<Result<_>>()?
                }
                ("data", "train") => train_dir = Some(PathBuf::from(value)),
                ("data", "val") => val_dir = Some(PathBuf::from(value)),
                ("run", "teacher") => teacher = Some(PathBuf::from(value)),
                ("run", "out") => out = Some(PathBuf::from(value)),
                ("model", "width") => {
                    student_width = value
                        .parse()
                        .map_err(|_| bad(format!("bad width {value:?}")))?
                }
                ("optimizer", "lr") => optimizer.lr = num(value).map_err(bad)?,
                ("optimizer", "momentum") => {
                    optimizer.momentum = num(value).map_err(bad)?
                }
                ("optimizer", "batch") => optimizer.batch = int(value).map_err(bad)?,
                ("optimizer", "epochs") => {
                    optimizer.epochs = int(value).map_err(bad)?
                }
                ("optimizer", "lr_drops") => {
                    optimizer.lr_drops = value
                        .split(',')
                        .map(|s| int(s.trim()))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(bad)?
                }
                ("optimizer", "flip_prob") => {
                    optimizer.flip_prob = num(value).map_err(bad)?
                }
                _ => return Err(bad(format!("unknown key {section}.{key}"))),
            }
        }
        let missing = |what: &str| Error::Config(format!("grid file missing {what}"));
        if cells.is_empty() {
            return Err(missing("grid.cells"));
        }
        if seeds.is_empty() {
            return Err(missing("grid.seeds"));
        }
        for c in &cells {
            cell_distill_config(c)?;
        }
        Ok(GridConfig {
            cells,
            seeds,
            train_dir: train_dir.ok_or_else(|| missing("data.train"))?,
            val_dir: val_dir.ok_or_else(|| missing("data.val"))?,
            teacher: teacher.ok_or_else(|| missing("run.teacher"))?,
            out: out.ok_or_else(|| missing("run.out"))?,
            optimizer,
            student_width,
        })
    }

    pub fn run_config(&self, cell: &str, seed: u64) -> Result<RunConfig> {
        let distill = cell_distill_config(cell)?;
        let mut model = crate::detector::model::ModelConfig::student();
        model.width = self.student_width;
        let needs_teacher =
            distill.alpha > 0.0 || distill.beta > 0.0 || distill.soft_label_weight > 0.0;
        Ok(RunConfig {
            role: Role::Student,
            seed,
            out: self.out.join(format!("{cell}_s{seed}")),
            model,
            optimizer: self.optimizer.clone(),
            train_dir: self.train_dir.clone(),
            val_dir: self.val_dir.clone(),
            distill,
            teacher: needs_teacher.then(|| self.teacher.clone()),
        })
    }
}

fn num(v: &str) -> std::result::Result<f32, String> {
    v.parse().map_err(|_| format!("bad number {v:?}"))
}

fn int(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("bad integer {v:?}"))
}

#[derive(Clone, Debug)]
pub struct GridCellResult {
    pub cell: String,
    pub seed: u64,
    pub map: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GridResults {
    pub runs: Vec<GridCellResult>,
}

impl GridResults {
    pub fn maps(&self, cell: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.cell == cell)
            .filter_map(|r| r.map)
            .collect()
    }

    pub fn mean_std(&self, cell: &str) -> Option<(f64, f64)> {
        let maps = self.maps(cell);
        if maps.is_empty() {
            return None;
        }
        let n = maps.len() as f64;
        let mean = maps.iter().sum::<f64>() / n;
        let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    pub fn runs_csv(&self) -> String {
        let mut csv = String::from("cell,seed,map,error\n");
        for r in &self.runs {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.cell,
                r.seed,
                r.map.map_or_else(|| "-".into(), |m| format!("{m:.6}")),
                r.error.as_deref().unwrap_or("")
            ));
        }
        csv
    }

    pub fn summary_csv(&self, cells: &[String]) -> String {
        let mut csv = String::from("cell,n,mean_map,std_map\n");
        for cell in cells {
            match self.mean_std(cell) {
                Some((mean, std)) => csv.push_str(&format!(
                    "{cell},{},{mean:.6},{std:.6}\n",
                    self.maps(cell).len()
                )),
                None => csv.push_str(&format!("{cell},0,-,-\n")),
            }
        }
        csv
    }
}

/// Run every cell x seed; a cell failure is recorded and the grid continues.
/// A completed run (report.json with a matching config hash) is reused, so
/// interrupted grids resume where they stopped.
pub fn run_grid(grid: &GridConfig) -> Result<GridResults> {
    std::fs::create_dir_all(&grid.out)?;
    let mut runs = Vec::new();
    for cell in &grid.cells {
        for &seed in &grid.seeds {
            let cfg = grid.run_config(cell, seed)?;
            let result = match load_cached_report(&cfg) {
                Some(report) => Ok(report),
                None => train(&cfg),
            };
            runs.push(match result {
                Ok(report) => GridCellResult {
                    cell: cell.clone(),
                    seed,
                    map: Some(report.val.map),
                    error: None,
                },
                Err(e) => GridCellResult {
                    cell: cell.clone(),
                    seed,
                    map: None,
                    error: Some(e.to_string().replace(',', ";").replace('\n', " ")),
                },
            });
        }
    }
    let results = GridResults { runs };
    std::fs::write(grid.out.join("runs.csv"), results.runs_csv())?;
    std::fs::write(grid.out.join("summary.csv"), results.summary_csv(&grid.cells))?;
    Ok(results)
}

pub fn load_cached_report(cfg: &RunConfig) -> Option<RunReport> {
    let text = std::fs::read_to_string(cfg.out.join("report.json")).ok()?;
    let report: RunReport = serde_json::from_str(&text).ok()?;
    (report.config_hash == cfg.hash()).then_some(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_presets_match_method_definitions() {
        let b = cell_distill_config("baseline").unwrap();
        assert_eq!((b.alpha, b.beta, b.soft_label_weight), (0.0, 0.0, 0.0));
        let rm = cell_distill_config("rm").unwrap();
        assert_eq!(rm.alpha, 4.0);
        assert_eq!(rm.rank_mode, RankMode::ClsLoc);
        assert_eq!(rm.beta, 0.0);
        let rp = cell_distill_config("rm_pfi").unwrap();
        assert_eq!((rp.alpha, rp.beta), (4.0, 1.5));
        assert_eq!(rp.feature_mask, FeatureMaskMode::Pfi);
        assert!(cell_distill_config("banana").is_err());
    }

    #[test]
    fn grid_file_round_trip_and_validation() {
        let text = "\
[grid]
cells = baseline, rm_pfi
seeds = 1, 2, 3

[data]
train = d/train
val = d/val

[run]
teacher = runs/teacher/final.tdmp
out = runs/grid

[optimizer]
epochs = 2
";
        let g = GridConfig::parse(text).unwrap();
        assert_eq!(g.cells, vec!["baseline", "rm_pfi"]);
        assert_eq!(g.seeds, vec![1, 2, 3]);
        assert_eq!(g.optimizer.epochs, 2);
        let cfg = g.run_config("rm_pfi", 2).unwrap();
        assert!(cfg.teacher.is_some());
        assert!(cfg.out.ends_with("rm_pfi_s2"));
        let cfg = g.run_config("baseline", 1).unwrap();
        assert!(cfg.teacher.is_none());
        cfg.validate().unwrap();

        assert!(GridConfig::parse("[grid]\ncells = nope\nseeds = 1\n").is_err());
    }

    #[test]
    fn stats_over_cells() {
        let results = GridResults {
            runs: vec![
                GridCellResult {
                    cell: "baseline".into(),
                    seed: 1,
                    map: Some(0.5),
                    error: None,
                },
                GridCellResult {
                    cell: "baseline".into(),
                    seed: 2,
                    map: Some(0.7),
                    error: None,
                },
                GridCellResult {
                    cell: "rm".into(),
                    seed: 1,
                    map: None,
                    error: Some("boom".into()),
                },
            ],
        };
        let (mean, std) = results.mean_std("baseline").unwrap();
        assert!((mean - 0.6).abs() < 1e-12);
        assert!((std - 0.1).abs() < 1e-12);
        assert!(results.mean_std("rm").is_none());
        assert!(results.runs_csv().contains("boom"));
        assert!(results
            .summary_csv(&["baseline".into(), "rm".into()])
            .contains("rm,0,-,-"));
    }
}
