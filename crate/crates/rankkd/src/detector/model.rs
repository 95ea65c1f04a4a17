//! Miniature anchor-based one-stage detector.
//!
//! Backbone: 4 stride-2 3x3 conv stages with ReLU (taps at strides 8 and 16
//! by default). FPN: 1x1 laterals plus nearest-neighbour top-down add.
//! Head: two shared 3x3 convs, then separate 3x3 cls/reg convs. The cls
//! bias starts at -ln((1-p)/p) with p=0.01 so focal loss is stable early.

use crate::error::{Error, Result};
use crate::numerics::io::{read_archive, write_archive};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const BACKBONE_STAGES: usize = 4;
const CLS_PRIOR: f32 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel width of every stage (teacher 32, student 16 by default).
    pub width: usize,
    pub strides: Vec<usize>,
    pub num_classes: usize,
    pub anchors_per_loc: usize,
    pub anchor_scale: f32,
}

impl ModelConfig {
    pub fn teacher() -> Self {
        ModelConfig {
            width: 32,
            ..Self::student()
        }
    }

    pub fn student() -> Self {
        ModelConfig {
            width: 16,
            strides: vec![8, 16],
            num_classes: 3,
            anchors_per_loc: 1,
            anchor_scale: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_classes == 0 || self.anchors_per_loc == 0 {
            return Err(Error::Config("model dims must be nonzero".into()));
        }
        if self.strides.is_empty() {
            return Err(Error::Config("at least one FPN stride required".into()));
        }
        let mut prev = 0usize;
        for &s in &self.strides {
            if !s.is_power_of_two() || !(2..=16).contains(&s) {
                return Err(Error::Config(format!(
                    "stride {s} must be a power of two in [2,16]"
                )));
            }
            if prev != 0 && s != prev * 2 {
                return Err(Error::Config(
                    "strides must ascend by factors of two".into(),
                ));
            }
            prev = s;
        }
        Ok(())
    }

    fn backbone_tap(&self, stride: usize) -> usize {
        // stage i outputs stride 2^(i+1)
        (stride.trailing_zeros() - 1) as usize
    }
}

#[derive(Clone)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
}

/// Per-level prediction maps as tape variables: post-sigmoid class
/// probabilities [A*C,H,W], the raw logits behind them, and box deltas
/// [A*4,H,W].
pub struct LevelPredictions {
    pub cls_prob: Var,
    pub cls_logits: Var,
    pub reg: Var,
}

pub struct PredictionVars {
    pub levels: Vec<LevelPredictions>,
}

/// FPN features as tape variables, one [Q,H,W] map per level.
pub struct PyramidVars {
    pub levels: Vec<Var>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

impl DetectorModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let a = config.anchors_per_loc;
        let c = config.num_classes;
        let mut params: Vec<(String, Tensor<f32>)> = Vec::new();

        let push_conv = |params: &mut Vec<(String, Tensor<f32>)>,
                             rng: &mut ChaCha8Rng,
                             name: &str,
                             cout: usize,
                             cin: usize,
                             k: usize,
                             bias: f32| {
            let fan_in = cin * k * k;
            params.push((
                format!("{name}.weight"),
                he_uniform(rng, &[cout, cin, k, k], fan_in),
            ));
            params.push((format!("{name}.bias"), Tensor::full(vec![cout], bias)));
        };

        for stage in 0..BACKBONE_STAGES {
            let cin = if stage == 0 { 3 } else { w };
            push_conv(&mut params, &mut rng, &format!("backbone.{stage}"), w, cin, 3, 0.0);
        }
        for (li, _) in config.strides.iter().enumerate() {
            push_conv(&mut params, &mut rng, &format!("lateral.{li}"), w, w, 1, 0.0);
        }
        for hi in 0..2 {
            push_conv(&mut params, &mut rng, &format!("head.{hi}"), w, w, 3, 0.0);
        }
        let cls_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        push_conv(&mut params, &mut rng, "cls", a * c, w, 3, cls_bias);
        push_conv(&mut params, &mut rng, "reg", a * 4, w, 3, 0.0);

        Ok(DetectorModel { config, params })
    }

    pub fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Forward pass for one [3,H,W] image. Registers every parameter on the
    /// tape (in `params` order) and returns the per-level predictions and
    /// FPN pyramid together with the parameter vars for backward.
    pub fn forward(
        &self,
        tape: &Tape<f32>,
        image: &Tensor<f32>,
    ) -> Result<(PredictionVars, PyramidVars, Vec<Var>)> {
        let sh = image.shape();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(Error::Dimension(format!(
                "expected [3,H,W] image, got {:?}",
                sh
            )));
        }
        let (h, w) = (sh[1], sh[2]);
        let max_stride = *self.config.strides.iter().max().unwrap();
        if h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::Dimension(format!(
                "image {h}x{w} not divisible by max stride {max_stride}"
            )));
        }

        let pvars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        let pv = |name: &str| pvars[self.param_index(name)];

        let mut x = tape.reshape(
            tape.constant(image.clone()),
            vec![1, 3, h, w],
        );
        let mut taps = Vec::with_capacity(BACKBONE_STAGES);
        for stage in 0..BACKBONE_STAGES {
            let wv = pv(&format!("backbone.{stage}.weight"));
            let bv = pv(&format!("backbone.{stage}.bias"));
            x = tape.relu(tape.conv2d(x, wv, bv, 2, 1)?);
            taps.push(x);
        }

        // Laterals, then top-down nearest-neighbour adds.
        let nl = self.config.strides.len();
        let mut laterals = Vec::with_capacity(nl);
        for (li, &stride) in self.config.strides.iter().enumerate() {
            let tap = taps[self.config.backbone_tap(stride)];
            let wv = pv(&format!("lateral.{li}.weight"));
            let bv = pv(&format!("lateral.{li}.bias"));
            laterals.push(tape.conv2d(tap, wv, bv, 1, 0)?);
        }
        let mut pyramid = vec![laterals[nl - 1]; nl];
        for li in (0..nl - 1).rev() {
            let upper = pyramid[li + 1];
            let us = {
                let v = tape.value(upper);
                let s = v.shape().to_vec();
                let squeezed = tape.reshape(upper, vec![s[1], s[2], s[3]]);
                let up = tape.upsample_nearest2(squeezed);
                let u = tape.value(up).shape().to_vec();
                tape.reshape(up, vec![1, u[0], u[1], u[2]])
            };
            pyramid[li] = tape.add(laterals[li], us);
        }

        let mut levels = Vec::with_capacity(nl);
        let mut feat_levels = Vec::with_capacity(nl);
        for (li, &stride) in self.config.strides.iter().enumerate() {
            let mut f = pyramid[li];
            for hi in 0..2 {
                let wv = pv(&format!("head.{hi}.weight"));
                let bv = pv(&format!("head.{hi}.bias"));
                f = tape.relu(tape.conv2d(f, wv, bv, 1, 1)?);
            }
            let (lh, lw) = (h / stride, w / stride);
            let cls_logits4 = tape.conv2d(f, pv("cls.weight"), pv("cls.bias"), 1, 1)?;
            let reg4 = tape.conv2d(f, pv("reg.weight"), pv("reg.bias"), 1, 1)?;
            let ac = self.config.anchors_per_loc * self.config.num_classes;
            let cls_logits = tape.reshape(cls_logits4, vec![ac, lh, lw]);
            let reg = tape.reshape(reg4, vec![self.config.anchors_per_loc * 4, lh, lw]);
            let cls_prob = tape.sigmoid(cls_logits);
            // Pyramid features are exposed pre-head (the imitation surface).
            let pw = self.config.width;
            feat_levels.push(tape.reshape(pyramid[li], vec![pw, lh, lw]));
            levels.push(LevelPredictions {
                cls_prob,
                cls_logits,
                reg,
            });
        }

        Ok((
            PredictionVars { levels },
            PyramidVars {
                levels: feat_levels,
            },
            pvars,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.params.clone();
        entries.push((
            "meta.config".to_string(),
            config_meta_tensor(&self.config),
        ));
        let mut w = BufWriter::new(File::create(path)?);
        write_archive(&mut w, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(
            File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?,
        );
        let mut entries = read_archive(&mut r)?;
        let meta_pos = entries
            .iter()
            .position(|(n, _)| n == "meta.config")
            .ok_or_else(|| Error::Load("checkpoint missing meta.config".into()))?;
        let (_, meta) = entries.remove(meta_pos);
        let config = config_from_meta(&meta)?;
        let model = DetectorModel {
            config,
            params: entries,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = DetectorModel::new(self.config.clone(), 0)?;
        if reference.params.len() != self.params.len() {
            return Err(Error::Load(format!(
                "checkpoint has {} tensors, config {:?} implies {}",
                self.params.len(),
                self.config,
                reference.params.len()
            )));
        }
        for ((n0, t0), (n1, t1)) in reference.params.iter().zip(&self.params) {
            if n0 != n1 || t0.shape() != t1.shape() {
                return Err(Error::Load(format!(
                    "checkpoint tensor {n1} {:?} does not match config (width {}): expected {n0} {:?}",
                    t1.shape(),
                    self.config.width,
                    t0.shape()
                )));
            }
        }
        Ok(())
    }
}

fn config_meta_tensor(c: &ModelConfig) -> Tensor<f32> {
    let mut data = vec![
        c.width as f32,
        c.num_classes as f32,
        c.anchors_per_loc as f32,
        c.anchor_scale,
        c.strides.len() as f32,
    ];
    data.extend(c.strides.iter().map(|&s| s as f32));
    Tensor::from_vec(vec![data.len()], data).unwrap()
}

fn config_from_meta(t: &Tensor<f32>) -> Result<ModelConfig> {
    let d = t.data();
    if d.len() < 5 {
        return Err(Error::Load("malformed meta.config tensor".into()));
    }
    let nl = d[4] as usize;
    if d.len() != 5 + nl {
        return Err(Error::Load("malformed meta.config strides".into()));
    }
    Ok(ModelConfig {
        width: d[0] as usize,
        num_classes: d[1] as usize,
        anchors_per_loc: d[2] as usize,
        anchor_scale: d[3],
        strides: d[5..].iter().map(|&s| s as usize).collect(),
    })
}
