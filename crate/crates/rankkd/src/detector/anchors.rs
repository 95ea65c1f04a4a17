//! Anchor tiling and max-IoU label assignment.

use crate::detector::boxes::{iou, BBox};
use crate::detector::model::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AnchorLevel {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub anchors_per_loc: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorSet {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    /// Starting global index of a level's anchors.
    pub fn level_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(|l| l.boxes.len()).sum()
    }

    pub fn get(&self, global: usize) -> &BBox {
        let mut idx = global;
        for l in &self.levels {
            if idx < l.boxes.len() {
                return &l.boxes[idx];
            }
            idx -= l.boxes.len();
        }
        panic!("anchor index {global} out of range {}", self.total());
    }

    /// (level, y, x, anchor-within-location) of a global index.
    pub fn locate(&self, global: usize) -> (usize, usize, usize, usize) {
        let mut idx = global;
        for (li, l) in self.levels.iter().enumerate() {
            if idx < l.boxes.len() {
                let a = idx % l.anchors_per_loc;
                let loc = idx / l.anchors_per_loc;
                return (li, loc / l.w, loc % l.w, a);
            }
            idx -= l.boxes.len();
        }
        panic!("anchor index {global} out of range {}", self.total());
    }
}

/// One square anchor of side `anchor_scale * stride` per location per level,
/// centered at ((x+0.5)*stride, (y+0.5)*stride).
pub fn generate_anchors(config: &ModelConfig, image_size: (usize, usize)) -> Result<AnchorSet> {
    let (ih, iw) = image_size;
    let mut levels = Vec::with_capacity(config.strides.len());
    for &stride in &config.strides {
        if ih % stride != 0 || iw % stride != 0 {
            return Err(Error::Config(format!(
                "image size {ih}x{iw} not divisible by stride {stride}"
            )));
        }
        let (h, w) = (ih / stride, iw / stride);
        let side = config.anchor_scale * stride as f32;
        let mut boxes = Vec::with_capacity(h * w * config.anchors_per_loc);
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f32 + 0.5) * stride as f32;
                let cy = (y as f32 + 0.5) * stride as f32;
                for _ in 0..config.anchors_per_loc {
                    boxes.push(BBox {
                        x1: cx - side * 0.5,
                        y1: cy - side * 0.5,
                        x2: cx + side * 0.5,
                        y2: cy + side * 0.5,
                    });
                }
            }
        }
        levels.push(AnchorLevel {
            stride,
            h,
            w,
            anchors_per_loc: config.anchors_per_loc,
            boxes,
        });
    }
    Ok(AnchorSet { levels })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AnchorStatus {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug)]
pub struct Assignment {
    pub status: Vec<AnchorStatus>,
    /// Positive anchor indices per instance, ascending (the canonical order
    /// shared by teacher and student).
    pub instance_anchors: Vec<Vec<usize>>,
}

impl Assignment {
    pub fn num_instances(&self) -> usize {
        self.instance_anchors.len()
    }

    pub fn num_positives(&self) -> usize {
        self.instance_anchors.iter().map(|v| v.len()).sum()
    }
}

/// Max-IoU assignment: positive at IoU >= 0.5 (to the argmax GT), negative
/// below 0.4, ignore between. Each GT left without a positive anchor is
/// force-assigned its highest-IoU anchor, so N_j >= 1 always holds.
pub fn assign_labels(anchors: &AnchorSet, gt: &[(BBox, usize)]) -> Assignment {
    let n = anchors.total();
    let mut status = vec![AnchorStatus::Negative; n];
    let mut instance_anchors: Vec<Vec<usize>> = vec![Vec::new(); gt.len()];
    if gt.is_empty() {
        return Assignment {
            status,
            instance_anchors,
        };
    }

    let mut best_iou = vec![0.0f32; n];
    let mut best_gt = vec![0usize; n];
    let mut flat = Vec::with_capacity(n);
    for l in &anchors.levels {
        flat.extend_from_slice(&l.boxes);
    }
    for (ai, ab) in flat.iter().enumerate() {
        for (gi, (gb, _)) in gt.iter().enumerate() {
            let v = iou(ab, gb);
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
        }
        status[ai] = if best_iou[ai] >= 0.5 {
            AnchorStatus::Positive(best_gt[ai])
        } else if best_iou[ai] < 0.4 {
            AnchorStatus::Negative
        } else {
            AnchorStatus::Ignore
        };
    }

    for (ai, st) in status.iter().enumerate() {
        if let AnchorStatus::Positive(gi) = st {
            instance_anchors[*gi].push(ai);
        }
    }

    // Low-quality force assignment for instances with no positive anchor.
    for gi in 0..gt.len() {
        if !instance_anchors[gi].is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            iou(&flat[b], &gt[gi].0)
                .partial_cmp(&iou(&flat[a], &gt[gi].0))
                .unwrap()
                .then(a.cmp(&b))
        });
        for ai in order {
            // Do not rob another instance of its only anchor.
            if let AnchorStatus::Positive(other) = status[ai] {
                if instance_anchors[other].len() <= 1 {
                    continue;
                }
                instance_anchors[other].retain(|&x| x != ai);
            }
            status[ai] = AnchorStatus::Positive(gi);
            instance_anchors[gi].push(ai);
            break;
        }
    }
    for v in &mut instance_anchors {
        v.sort_unstable();
    }

    Assignment {
        status,
        instance_anchors,
    }
}
