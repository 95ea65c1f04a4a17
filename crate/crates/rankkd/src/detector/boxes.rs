//! Boxes in corner format, IoU, the (dx,dy,dw,dh) codec, and NMS.

use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        debug_assert!(x2 > x1 && y2 > y1, "degenerate box {x1},{y1},{x2},{y2}");
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// (dx, dy, dw, dh) relative to the anchor.
pub fn encode_boxes(b: &BBox, anchor: &BBox) -> [f32; 4] {
    let (cxa, cya) = anchor.center();
    let (cxb, cyb) = b.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    [
        (cxb - cxa) / wa,
        (cyb - cya) / ha,
        (b.width() / wa).ln(),
        (b.height() / ha).ln(),
    ]
}

/// Inverse of [`encode_boxes`]; decoded width/height clamped to 1 pixel.
pub fn decode_boxes(delta: &[f32; 4], anchor: &BBox) -> BBox {
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = cxa + delta[0] * wa;
    let cy = cya + delta[1] * ha;
    let w = (delta[2].exp() * wa).max(1.0);
    let h = (delta[3].exp() * ha).max(1.0);
    BBox {
        x1: cx - w * 0.5,
        y1: cy - h * 0.5,
        x2: cx + w * 0.5,
        y2: cy + h * 0.5,
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box_: BBox,
    pub score: f32,
    pub class_id: usize,
    /// Global anchor index the box was regressed from; kept through NMS so
    /// diagnostics can compare which anchors produced the final boxes.
    pub source_anchor: usize,
}

/// Greedy per-class suppression by descending score; ties break on lower
/// anchor index so the result is independent of input ordering.
pub fn nms(
    detections: &[Detection],
    iou_threshold: f32,
    score_threshold: f32,
    max_dets: usize,
) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    let mut classes: Vec<usize> = detections.iter().map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let mut cand: Vec<&Detection> = detections
            .iter()
            .filter(|d| d.class_id == c && d.score > score_threshold)
            .collect();
        cand.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.source_anchor.cmp(&b.source_anchor))
        });
        let mut survivors: Vec<&Detection> = Vec::new();
        for d in cand {
            if survivors.iter().all(|s| iou(&s.box_, &d.box_) <= iou_threshold) {
                survivors.push(d);
            }
        }
        kept.extend(survivors.into_iter().copied());
    }
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.source_anchor.cmp(&b.source_anchor))
    });
    kept.truncate(max_dets);
    kept
}
