//! Domain types for the distillation losses.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Detached per-level feature maps, [Q, H_l, W_l] each.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<E: Scalar = f32> {
    pub levels: Vec<Tensor<E>>,
}

impl<E: Scalar> FeaturePyramid<E> {
    pub fn new(levels: Vec<Tensor<E>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Dimension("empty feature pyramid".into()));
        }
        let q = levels[0].shape()[0];
        for (i, l) in levels.iter().enumerate() {
            if l.shape().len() != 3 {
                return Err(Error::Dimension(format!(
                    "pyramid level {i} is not [Q,H,W]: {:?}",
                    l.shape()
                )));
            }
            if l.shape()[0] != q {
                return Err(Error::Dimension(format!(
                    "pyramid level {i} has {} channels, expected {q}",
                    l.shape()[0]
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }
}

/// Per-instance classification scores and box qualities at its positive
/// anchors, in ascending global anchor-index order.
#[derive(Clone, Debug)]
pub struct InstanceAnchorScores {
    pub instance: usize,
    pub scores: Vec<f32>,
    pub qualities: Vec<f32>,
}

/// Normalized rank distribution over one instance's positive anchors.
#[derive(Clone, Debug)]
pub struct RankDistribution {
    pub probs: Vec<f32>,
}

/// Per-level nonnegative position-wise difference maps, [H_l, W_l] each.
#[derive(Clone, Debug)]
pub struct DifferenceMap<E: Scalar = f32> {
    pub levels: Vec<Tensor<E>>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    Cls,
    ClsLoc,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMaskMode {
    Whole,
    Positive,
    Negative,
    Gt,
    Pfi,
}

/// Literal squared-product form of the guided imitation loss, or the linear
/// (no outer square) variant kept for comparison.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfiForm {
    Squared,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Rank-mimicking weight.
    pub alpha: f32,
    /// Feature-imitation weight (guided or masked MSE per `feature_mask`).
    pub beta: f32,
    /// Soft-label temperature.
    pub temperature: f32,
    pub rank_mode: RankMode,
    pub feature_mask: FeatureMaskMode,
    pub loc_rank_weight: f32,
    pub pfi_form: PfiForm,
    /// Weight of the ablation-only soft-label KD term (0 disables it).
    pub soft_label_weight: f32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 4.0,
            beta: 1.5,
            temperature: 2.0,
            rank_mode: RankMode::ClsLoc,
            feature_mask: FeatureMaskMode::Pfi,
            loc_rank_weight: 1.0,
            pfi_form: PfiForm::Squared,
            soft_label_weight: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.loc_rank_weight < 0.0 {
            return Err(Error::Config("distill weights must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.soft_label_weight < 0.0 {
            return Err(Error::Config("soft_label_weight must be >= 0".into()));
        }
        Ok(())
    }
}
