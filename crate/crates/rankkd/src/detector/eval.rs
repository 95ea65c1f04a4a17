//! Detection extraction and VOC-style AP@0.5 evaluation.

use crate::detector::anchors::AnchorSet;
use crate::detector::boxes::{decode_boxes, iou, nms, BBox, Detection};
use crate::detector::model::DetectorModel;
use crate::error::Result;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const NMS_IOU: f32 = 0.5;
pub const SCORE_THRESHOLD: f32 = 0.05;
pub const MAX_DETECTIONS: usize = 100;

/// Run the model on one image and return post-NMS detections.
pub fn detect(
    model: &DetectorModel,
    anchors: &AnchorSet,
    image: &Tensor<f32>,
) -> Result<Vec<Detection>> {
    let tape = Tape::new();
    let (preds, _, _) = model.forward(&tape, image)?;
    let mut raw = Vec::new();
    let c = model.config.num_classes;
    for (li, level) in anchors.levels.iter().enumerate() {
        let cls = tape.value(preds.levels[li].cls_prob);
        let reg = tape.value(preds.levels[li].reg);
        let hw = level.h * level.w;
        let off = anchors.level_offset(li);
        for loc in 0..hw {
            for ai in 0..level.anchors_per_loc {
                let global = off + loc * level.anchors_per_loc + ai;
                let anchor = anchors.get(global);
                let mut best_cls = 0usize;
                let mut best_score = -1.0f32;
                for ci in 0..c {
                    let s = cls.data()[(ai * c + ci) * hw + loc];
                    if s > best_score {
                        best_score = s;
                        best_cls = ci;
                    }
                }
                if best_score <= SCORE_THRESHOLD {
                    continue;
                }
                let delta = [
                    reg.data()[(ai * 4) * hw + loc],
                    reg.data()[(ai * 4 + 1) * hw + loc],
                    reg.data()[(ai * 4 + 2) * hw + loc],
                    reg.data()[(ai * 4 + 3) * hw + loc],
                ];
                raw.push(Detection {
                    box_: decode_boxes(&delta, anchor),
                    score: best_score,
                    class_id: best_cls,
                    source_anchor: global,
                });
            }
        }
    }
    Ok(nms(&raw, NMS_IOU, SCORE_THRESHOLD, MAX_DETECTIONS))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApReport {
    /// (class id, AP) for every class present in the ground truth.
    pub per_class: Vec<(usize, f64)>,
    pub map: f64,
}

/// VOC-style AP@`iou_threshold` with continuous (all-points) interpolation.
/// Detections are matched greedily in descending score order; each GT can
/// match at most one detection. Classes absent from the GT are excluded.
pub fn evaluate_ap(
    detections: &[(String, Vec<Detection>)],
    gt: &[(String, Vec<(BBox, usize)>)],
    iou_threshold: f32,
) -> ApReport {
    let gt_by_image: HashMap<&str, &Vec<(BBox, usize)>> =
        gt.iter().map(|(id, g)| (id.as_str(), g)).collect();

    let mut classes: Vec<usize> = gt
        .iter()
        .flat_map(|(_, g)| g.iter().map(|(_, c)| *c))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let n_gt: usize = gt
            .iter()
            .map(|(_, g)| g.iter().filter(|(_, c)| *c == class).count())
            .sum();

        // (score, image, detection) sorted by descending score with
        // deterministic tie-breaks.
        let mut dets: Vec<(&str, &Detection)> = detections
            .iter()
            .flat_map(|(id, ds)| {
                ds.iter()
                    .filter(|d| d.class_id == class)
                    .map(move |d| (id.as_str(), d))
            })
            .collect();
        dets.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap()
                .then(a.0.cmp(b.0))
                .then(a.1.source_anchor.cmp(&b.1.source_anchor))
        });

        let mut matched: HashMap<&str, Vec<bool>> = HashMap::new();
        let mut tp = Vec::with_capacity(dets.len());
        for (img, det) in dets {
            let Some(g) = gt_by_image.get(img) else {
                tp.push(false);
                continue;
            };
            let used = matched
                .entry(img)
                .or_insert_with(|| vec![false; g.len()]);
            let mut best = None;
            let mut best_iou = iou_threshold;
            for (gi, (gb, gc)) in g.iter().enumerate() {
                if *gc != class || used[gi] {
                    continue;
                }
                let v = iou(&det.box_, gb);
                if v >= best_iou {
                    best_iou = v;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                used[gi] = true;
                tp.push(true);
            } else {
                tp.push(false);
            }
        }
        per_class.push((class, average_precision(&tp, n_gt)));
    }

    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    ApReport { per_class, map }
}

/// Area under the precision envelope of the PR curve.
fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut n_tp = 0usize;
    for (i, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            n_tp += 1;
        }
        let recall = n_tp as f64 / n_gt as f64;
        let precision = n_tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    // Precision envelope: p(r) = max precision at recall >= r.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let p_max = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    ap
}

/// One JSON line per detection, as exported by the eval command.
#[derive(Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub box_: [f32; 4],
    pub score: f32,
    pub class: usize,
    pub anchor: usize,
}

pub fn detection_records(detections: &[(String, Vec<Detection>)]) -> Vec<DetectionRecord> {
    detections
        .iter()
        .flat_map(|(id, ds)| {
            ds.iter().map(move |d| DetectionRecord {
                image: id.clone(),
                box_: [d.box_.x1, d.box_.y1, d.box_.x2, d.box_.y2],
                score: d.score,
                class: d.class_id,
                anchor: d.source_anchor,
            })
        })
        .collect()
}
