//! Rank mimicking: per-instance score distributions over positive anchors
//! and the KL loss that transfers the teacher's anchor ranking.

use crate::detector::anchors::{AnchorSet, Assignment};
use crate::detector::boxes::BBox;
use crate::distill::types::{InstanceAnchorScores, RankDistribution, RankMode};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// One instance's differentiable anchor scores/qualities on the tape.
pub struct InstanceVars {
    pub instance: usize,
    pub anchor_ids: Vec<usize>,
    /// 1-D [n]: class probability of the instance's class at each anchor.
    pub scores: Var,
    /// 1-D [n]: IoU of the decoded box against the instance's GT box.
    pub qualities: Var,
}

/// Gather each instance's positive-anchor scores and decoded-box qualities
/// as tape values (anchors in ascending global-index order).
pub fn instance_score_vars<E: Scalar>(
    tape: &Tape<E>,
    cls_probs: &[Var],
    reg_maps: &[Var],
    anchors: &AnchorSet,
    assignment: &Assignment,
    gt: &[(BBox, usize)],
    num_classes: usize,
) -> Vec<InstanceVars> {
    let mut out = Vec::new();
    for (gi, anchor_ids) in assignment.instance_anchors.iter().enumerate() {
        if anchor_ids.is_empty() {
            continue;
        }
        let (gt_box, gt_class) = &gt[gi];
        let mut score_parts = Vec::with_capacity(anchor_ids.len());
        let mut quality_parts = Vec::with_capacity(anchor_ids.len());
        for &global in anchor_ids {
            let (li, y, x, ai) = anchors.locate(global);
            let level = &anchors.levels[li];
            let hw = level.h * level.w;
            let loc = y * level.w + x;
            score_parts.push(tape.gather(
                cls_probs[li],
                &[(ai * num_classes + gt_class) * hw + loc],
            ));
            let idxs: Vec<usize> = (0..4).map(|d| (ai * 4 + d) * hw + loc).collect();
            let deltas = tape.gather(reg_maps[li], &idxs);
            quality_parts.push(decoded_iou(tape, deltas, anchors.get(global), gt_box));
        }
        out.push(InstanceVars {
            instance: gi,
            anchor_ids: anchor_ids.clone(),
            scores: tape.concat(&score_parts),
            qualities: tape.concat(&quality_parts),
        });
    }
    out
}

/// Differentiable IoU between the box decoded from `deltas` (1-D [4],
/// dx dy dw dh) at `anchor` and the fixed ground-truth box.
fn decoded_iou<E: Scalar>(tape: &Tape<E>, deltas: Var, anchor: &BBox, gt: &BBox) -> Var {
    let (wa, ha) = (anchor.width() as f64, anchor.height() as f64);
    let (cxa, cya) = {
        let c = anchor.center();
        (c.0 as f64, c.1 as f64)
    };
    let dx = tape.gather(deltas, &[0]);
    let dy = tape.gather(deltas, &[1]);
    let dw = tape.clamp(tape.gather(deltas, &[2]), -4.0, 4.0);
    let dh = tape.clamp(tape.gather(deltas, &[3]), -4.0, 4.0);
    let cx = tape.add_scalar(tape.scale(dx, wa), cxa);
    let cy = tape.add_scalar(tape.scale(dy, ha), cya);
    let w = tape.max_scalar(tape.scale(tape.exp(dw), wa), 1.0);
    let h = tape.max_scalar(tape.scale(tape.exp(dh), ha), 1.0);
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, half_w);
    let x2 = tape.add(cx, half_w);
    let y1 = tape.sub(cy, half_h);
    let y2 = tape.add(cy, half_h);
    let iw = tape.relu(tape.sub(
        tape.min_scalar(x2, gt.x2 as f64),
        tape.max_scalar(x1, gt.x1 as f64),
    ));
    let ih = tape.relu(tape.sub(
        tape.min_scalar(y2, gt.y2 as f64),
        tape.max_scalar(y1, gt.y1 as f64),
    ));
    let inter = tape.mul(iw, ih);
    let union = tape.sub(tape.add_scalar(tape.mul(w, h), gt.area() as f64), inter);
    tape.div(inter, tape.max_scalar(union, 1e-8))
}

/// Softmax (temperature 1) over one instance's anchor scores.
pub fn rank_distribution(scores: &[f32]) -> RankDistribution {
    let mx = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = scores.iter().map(|&s| (s - mx).exp()).collect();
    let sum: f32 = exps.iter().sum();
    RankDistribution {
        probs: exps.iter().map(|&e| e / sum).collect(),
    }
}

/// Detached per-instance scores/qualities (for diagnostics and the teacher
/// side of the rank loss).
pub fn extract_instance_scores(
    cls_probs: &[Tensor<f32>],
    reg_maps: &[Tensor<f32>],
    anchors: &AnchorSet,
    assignment: &Assignment,
    gt: &[(BBox, usize)],
    num_classes: usize,
) -> Vec<InstanceAnchorScores> {
    let tape = Tape::<f32>::new();
    let cp: Vec<Var> = cls_probs.iter().map(|t| tape.constant(t.clone())).collect();
    let rm: Vec<Var> = reg_maps.iter().map(|t| tape.constant(t.clone())).collect();
    instance_score_vars(&tape, &cp, &rm, anchors, assignment, gt, num_classes)
        .into_iter()
        .map(|iv| InstanceAnchorScores {
            instance: iv.instance,
            scores: tape.value(iv.scores).data().to_vec(),
            qualities: tape.value(iv.qualities).data().to_vec(),
        })
        .collect()
}

/// (1/M) sum_j KL(teacher_j || student_j) over instance rank distributions,
/// plus the same over box-quality distributions when `mode` is `ClsLoc`.
/// 0 when there are no instances with positive anchors.
pub fn rank_mimicking_loss<E: Scalar>(
    tape: &Tape<E>,
    student: &[InstanceVars],
    teacher: &[InstanceAnchorScores],
    mode: RankMode,
    loc_rank_weight: f64,
) -> crate::error::Result<Var> {
    if student.is_empty() {
        return Ok(tape.constant(Tensor::scalar(E::zero())));
    }
    assert_eq!(student.len(), teacher.len());
    let mut total: Option<Var> = None;
    for (s, t) in student.iter().zip(teacher) {
        assert_eq!(s.instance, t.instance);
        assert_eq!(s.anchor_ids.len(), t.scores.len());
        let mut term = instance_kl(tape, &t.scores, s.scores)?;
        if mode == RankMode::ClsLoc {
            let loc = instance_kl(tape, &t.qualities, s.qualities)?;
            term = tape.add(term, tape.scale(loc, loc_rank_weight));
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / student.len() as f64))
}

fn instance_kl<E: Scalar>(
    tape: &Tape<E>,
    teacher_scores: &[f32],
    student_scores: Var,
) -> crate::error::Result<Var> {
    let t_dist = rank_distribution(teacher_scores);
    let t_probs = Tensor::from_vec(
        vec![t_dist.probs.len()],
        t_dist.probs.iter().map(|&p| E::from_f32(p)).collect(),
    )
    .unwrap();
    let p = tape.constant(t_probs);
    let q = tape.softmax(student_scores, 1.0)?;
    Ok(tape.kl_div(p, q))
}
