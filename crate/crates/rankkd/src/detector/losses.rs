//! Detection task losses on the tape: focal loss for classification and
//! smooth-L1 for box regression over positive anchors.

use crate::detector::anchors::{AnchorSet, AnchorStatus, Assignment};
use crate::detector::boxes::{encode_boxes, BBox};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

const PROB_EPS: f64 = 1e-7;

/// Focal loss over all non-ignored anchors, normalized by the number of
/// positive anchors (by 1 when there are none).
pub fn focal_loss<E: Scalar>(
    tape: &Tape<E>,
    cls_probs: &[Var],
    anchors: &AnchorSet,
    assignment: &Assignment,
    gt_classes: &[usize],
    num_classes: usize,
    alpha_f: f64,
    gamma: f64,
) -> Var {
    assert_eq!(cls_probs.len(), anchors.levels.len());
    let npos = assignment.num_positives().max(1);
    let mut total: Option<Var> = None;
    for (li, level) in anchors.levels.iter().enumerate() {
        let (h, w, a) = (level.h, level.w, level.anchors_per_loc);
        let hw = h * w;
        let n = a * num_classes * hw;
        // target one-hot and per-element weight (alpha_t, ignores zeroed)
        let mut target = Tensor::<E>::zeros(vec![a * num_classes, h, w]);
        let mut weight = Tensor::<E>::full(
            vec![a * num_classes, h, w],
            E::from_f64(1.0 - alpha_f),
        );
        let off = anchors.level_offset(li);
        for loc in 0..hw {
            for ai in 0..a {
                let global = off + loc * a + ai;
                match assignment.status[global] {
                    AnchorStatus::Ignore => {
                        for c in 0..num_classes {
                            weight.data_mut()[(ai * num_classes + c) * hw + loc] = E::zero();
                        }
                    }
                    AnchorStatus::Positive(gi) => {
                        let tc = gt_classes[gi];
                        let idx = (ai * num_classes + tc) * hw + loc;
                        target.data_mut()[idx] = E::one();
                        weight.data_mut()[idx] = E::from_f64(alpha_f);
                    }
                    AnchorStatus::Negative => {}
                }
            }
        }
        debug_assert_eq!(tape.value(cls_probs[li]).numel(), n);

        let p = tape.clamp(cls_probs[li], PROB_EPS, 1.0 - PROB_EPS);
        // p_t = t*p + (1-t)*(1-p)
        let one_minus_p = tape.add_scalar(tape.neg(p), 1.0);
        let p_t = tape.add(
            tape.mul_const(p, &target),
            tape.mul_const(one_minus_p, &target.map(|t| E::one() - t)),
        );
        let focal_w = tape.powf(tape.add_scalar(tape.neg(p_t), 1.0), gamma);
        let nll = tape.neg(tape.ln(p_t));
        let elems = tape.mul_const(tape.mul(focal_w, nll), &weight);
        let s = tape.sum(elems);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    tape.scale(total.expect("at least one level"), 1.0 / npos as f64)
}

/// Mean smooth-L1 (beta point 1.0) over the 4 coordinates of every positive
/// anchor; 0 when there are no positives.
pub fn smooth_l1_loss<E: Scalar>(
    tape: &Tape<E>,
    reg_maps: &[Var],
    anchors: &AnchorSet,
    assignment: &Assignment,
    gt: &[(BBox, usize)],
) -> Var {
    let mut preds = Vec::new();
    let mut targets: Vec<E> = Vec::new();
    for (gi, anchor_ids) in assignment.instance_anchors.iter().enumerate() {
        for &global in anchor_ids {
            let (li, y, x, ai) = anchors.locate(global);
            let level = &anchors.levels[li];
            let hw = level.h * level.w;
            let idxs: Vec<usize> = (0..4)
                .map(|d| (ai * 4 + d) * hw + y * level.w + x)
                .collect();
            preds.push(tape.gather(reg_maps[li], &idxs));
            let enc = encode_boxes(&gt[gi].0, anchors.get(global));
            targets.extend(enc.iter().map(|&v| E::from_f32(v)));
        }
    }
    if preds.is_empty() {
        return tape.constant(Tensor::scalar(E::zero()));
    }
    let pred = tape.concat(&preds);
    let target = Tensor::from_vec(vec![targets.len()], targets).unwrap();
    let diff = tape.add_const(pred, &target.map(|v| -v));
    huber_mean(tape, diff)
}

/// Elementwise smooth-L1 of a vector, averaged: 0.5 x^2 for |x| < 1,
/// |x| - 0.5 otherwise.
pub fn huber_mean<E: Scalar>(tape: &Tape<E>, diff: Var) -> Var {
    let v = tape.value(diff);
    let mask = v.map(|x| {
        if x.abs() < E::one() {
            E::one()
        } else {
            E::zero()
        }
    });
    let quad = tape.scale(tape.sqr(diff), 0.5);
    let lin = tape.add_scalar(tape.abs(diff), -0.5);
    let inner = tape.mul_const(quad, &mask);
    let outer = tape.mul_const(lin, &mask.map(|m| E::one() - m));
    tape.mean(tape.add(inner, outer))
}
