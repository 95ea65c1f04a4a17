//! Run configuration: flat `key = value` files with `[section]` headers.

use crate::detector::model::ModelConfig;
use crate::distill::types::{DistillConfig, FeatureMaskMode, PfiForm, RankMode};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub epochs: usize,
    /// 1-based epochs at which lr is multiplied by 0.1.
    pub lr_drops: Vec<usize>,
    /// Linear lr warmup over this many leading steps (0 disables).
    pub warmup_steps: usize,
    /// Warmup starts at this fraction of the base lr.
    pub warmup_factor: f32,
    /// Global L2 gradient-norm clip applied per step (0 disables). The
    /// network has no normalization layers, so occasional hard examples
    /// produce gradient spikes that diverge at the full lr without this.
    pub max_grad_norm: f32,
    pub flip_prob: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            batch: 8,
            epochs: 20,
            lr_drops: vec![14, 17],
            warmup_steps: 500,
            warmup_factor: 0.1,
            max_grad_norm: 5.0,
            flip_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub role: Role,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub distill: DistillConfig,
    /// Teacher checkpoint; required for any student distillation term.
    pub teacher: Option<PathBuf>,
}

impl RunConfig {
    pub fn teacher_default(train: PathBuf, val: PathBuf, out: PathBuf, seed: u64) -> Self {
        RunConfig {
            role: Role::Teacher,
            seed,
            out,
            model: ModelConfig::teacher(),
            optimizer: OptimConfig::default(),
            train_dir: train,
            val_dir: val,
            distill: DistillConfig {
                alpha: 0.0,
                beta: 0.0,
                ..DistillConfig::default()
            },
            teacher: None,
        }
    }

    pub fn distills(&self) -> bool {
        self.role == Role::Student
            && (self.distill.alpha > 0.0
                || self.distill.beta > 0.0
                || self.distill.soft_label_weight > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        let o = &self.optimizer;
        if o.lr <= 0.0 || o.batch == 0 || o.epochs == 0 {
            return Err(Error::Config("lr/batch/epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&o.flip_prob) {
            return Err(Error::Config("flip_prob must be in [0,1]".into()));
        }
        if self.distills() && self.teacher.is_none() {
            return Err(Error::Config(
                "distillation terms require a teacher checkpoint".into(),
            ));
        }
        if self.role == Role::Teacher && self.teacher.is_some() {
            return Err(Error::Config("teacher runs take no teacher checkpoint".into()));
        }
        Ok(())
    }

    /// Canonical text form; also the on-disk snapshot format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!(
            "role = {}\n",
            match self.role {
                Role::Teacher => "teacher",
                Role::Student => "student",
            }
        ));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out = {}\n\n", self.out.display()));
        s.push_str("[model]\n");
        s.push_str(&format!("width = {}\n", self.model.width));
        s.push_str(&format!(
            "strides = {}\n",
            self.model
                .strides
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("num_classes = {}\n", self.model.num_classes));
        s.push_str(&format!("anchors_per_loc = {}\n", self.model.anchors_per_loc));
        s.push_str(&format!("anchor_scale = {}\n\n", self.model.anchor_scale));
        s.push_str("[optimizer]\n");
        let o = &self.optimizer;
        s.push_str(&format!("lr = {}\n", o.lr));
        s.push_str(&format!("momentum = {}\n", o.momentum));
        s.push_str(&format!("batch = {}\n", o.batch));
        s.push_str(&format!("epochs = {}\n", o.epochs));
        s.push_str(&format!(
            "lr_drops = {}\n",
            o.lr_drops
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("warmup_steps = {}\n", o.warmup_steps));
        s.push_str(&format!("warmup_factor = {}\n", o.warmup_factor));
        s.push_str(&format!("max_grad_norm = {}\n", o.max_grad_norm));
        s.push_str(&format!("flip_prob = {}\n\n", o.flip_prob));
        s.push_str("[data]\n");
        s.push_str(&format!("train = {}\n", self.train_dir.display()));
        s.push_str(&format!("val = {}\n\n", self.val_dir.display()));
        s.push_str("[distill]\n");
        if let Some(t) = &self.teacher {
            s.push_str(&format!("teacher = {}\n", t.display()));
        }
        let d = &self.distill;
        s.push_str(&format!("alpha = {}\n", d.alpha));
        s.push_str(&format!("beta = {}\n", d.beta));
        s.push_str(&format!("temperature = {}\n", d.temperature));
        s.push_str(&format!(
            "rank_mode = {}\n",
            match d.rank_mode {
                RankMode::Cls => "cls",
                RankMode::ClsLoc => "cls_loc",
            }
        ));
        s.push_str(&format!(
            "feature_mask = {}\n",
            match d.feature_mask {
                FeatureMaskMode::Whole => "whole",
                FeatureMaskMode::Positive => "positive",
                FeatureMaskMode::Negative => "negative",
                FeatureMaskMode::Gt => "gt",
                FeatureMaskMode::Pfi => "pfi",
            }
        ));
        s.push_str(&format!("loc_rank_weight = {}\n", d.loc_rank_weight));
        s.push_str(&format!(
            "pfi_form = {}\n",
            match d.pfi_form {
                PfiForm::Squared => "squared",
                PfiForm::Linear => "linear",
            }
        ));
        s.push_str(&format!("soft_label_weight = {}\n", d.soft_label_weight));
        s
    }

    /// SHA-256 of the canonical text, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::teacher_default(
            PathBuf::from("data/train"),
            PathBuf::from("data/val"),
            PathBuf::from("out"),
            0,
        );
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
            set_key(&mut cfg, &section, key, value)
                .map_err(|e| bad(format!("{section}.{key}: {e}")))?;
        }
        Ok(cfg)
    }
}

fn set_key(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> Result<()> {
    let unknown = || Error::Config("unknown key".into());
    let num = |v: &str| -> Result<f32> {
        v.parse().map_err(|_| Error::Config(format!("bad number {v:?}")))
    };
    let int = |v: &str| -> Result<usize> {
        v.parse().map_err(|_| Error::Config(format!("bad integer {v:?}")))
    };
    let list = |v: &str| -> Result<Vec<usize>> {
        v.split(',').map(|p| int(p.trim())).collect()
    };
    match (section, key) {
        ("run", "role") => {
            cfg.role = match value {
                "teacher" => Role::Teacher,
                "student" => Role::Student,
                _ => return Err(Error::Config(format!("bad role {value:?}"))),
            }
        }
        ("run", "seed") => {
            cfg.seed = value
                .parse()
                .map_err(|_| Error::Config(format!("bad seed {value:?}")))?
        }
        ("run", "out") => cfg.out = PathBuf::from(value),
        ("model", "width") => cfg.model.width = int(value)?,
        ("model", "strides") => cfg.model.strides = list(value)?,
        ("model", "num_classes") => cfg.model.num_classes = int(value)?,
        ("model", "anchors_per_loc") => cfg.model.anchors_per_loc = int(value)?,
        ("model", "anchor_scale") => cfg.model.anchor_scale = num(value)?,
        ("optimizer", "lr") => cfg.optimizer.lr = num(value)?,
        ("optimizer", "momentum") => cfg.optimizer.momentum = num(value)?,
        ("optimizer", "batch") => cfg.optimizer.batch = int(value)?,
        ("optimizer", "epochs") => cfg.optimizer.epochs = int(value)?,
        ("optimizer", "lr_drops") => cfg.optimizer.lr_drops = list(value)?,
        ("optimizer", "warmup_steps") => cfg.optimizer.warmup_steps = int(value)?,
        ("optimizer", "warmup_factor") => cfg.optimizer.warmup_factor = num(value)?,
        ("optimizer", "max_grad_norm") => cfg.optimizer.max_grad_norm = num(value)?,
        ("optimizer", "flip_prob") => cfg.optimizer.flip_prob = num(value)?,
        ("data", "train") => cfg.train_dir = PathBuf::from(value),
        ("data", "val") => cfg.val_dir = PathBuf::from(value),
        ("distill", "teacher") => cfg.teacher = Some(PathBuf::from(value)),
        ("distill", "alpha") => cfg.distill.alpha = num(value)?,
        ("distill", "beta") => cfg.distill.beta = num(value)?,
        ("distill", "temperature") => cfg.distill.temperature = num(value)?,
        ("distill", "rank_mode") => {
            cfg.distill.rank_mode = match value {
                "cls" => RankMode::Cls,
                "cls_loc" => RankMode::ClsLoc,
                _ => return Err(Error::Config(format!("bad rank_mode {value:?}"))),
            }
        }
        ("distill", "feature_mask") => {
            cfg.distill.feature_mask = match value {
                "whole" => FeatureMaskMode::Whole,
                "positive" => FeatureMaskMode::Positive,
                "negative" => FeatureMaskMode::Negative,
                "gt" => FeatureMaskMode::Gt,
                "pfi" => FeatureMaskMode::Pfi,
                _ => return Err(Error::Config(format!("bad feature_mask {value:?}"))),
            }
        }
        ("distill", "loc_rank_weight") => cfg.distill.loc_rank_weight = num(value)?,
        ("distill", "pfi_form") => {
            cfg.distill.pfi_form = match value {
                "squared" => PfiForm::Squared,
                "linear" => PfiForm::Linear,
                _ => return Err(Error::Config(format!("bad pfi_form {value:?}"))),
            }
        }
        ("distill", "soft_label_weight") => cfg.distill.soft_label_weight = num(value)?,
        _ => return Err(unknown()),
    }
    Ok(())
}
