//! Classic distillation baselines: cross-entropy, temperature soft labels,
//! and FPN feature imitation with selectable masks.

use crate::detector::anchors::{AnchorSet, AnchorStatus, Assignment};
use crate::detector::boxes::BBox;
use crate::distill::types::FeatureMaskMode;
use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOG_EPS: f64 = 1e-12;

/// -sum(y * ln p) averaged over the one-hot samples.
pub fn ce_loss<E: Scalar>(tape: &Tape<E>, probs: Var, one_hot: &Tensor<E>) -> Var {
    let n_samples = one_hot
        .data()
        .iter()
        .filter(|&&y| y > E::zero())
        .count()
        .max(1);
    let p = tape.clamp(probs, LOG_EPS, 1.0 - LOG_EPS);
    let weighted = tape.mul_const(tape.ln(p), one_hot);
    tape.scale(tape.sum(weighted), -1.0 / n_samples as f64)
}

/// KL(teacher_T || student_T) over category logits, per anchor position,
/// averaged over positions and levels. The teacher side is detached.
pub fn soft_label_loss<E: Scalar>(
    tape: &Tape<E>,
    student_logits: &[Var],
    teacher_logits: &[Tensor<E>],
    anchors_per_loc: usize,
    num_classes: usize,
    temperature: f64,
) -> Result<Var> {
    assert_eq!(student_logits.len(), teacher_logits.len());
    let mut total: Option<Var> = None;
    let mut n_positions = 0usize;
    for (lv, tl) in student_logits.iter().zip(teacher_logits) {
        let sh = tl.shape().to_vec();
        let (h, w) = (sh[1], sh[2]);
        let hw = h * w;
        for ai in 0..anchors_per_loc {
            let (from, to) = (ai * num_classes, (ai + 1) * num_classes);
            let s_slice = tape.slice_channels(*lv, from, to);
            let s_soft = tape.softmax_channels(s_slice, temperature)?;
            // Teacher tempered softmax, computed detached.
            let t_soft = channel_softmax_plain(tl, from, to, E::from_f64(temperature));
            // sum_c t' (ln t' - ln s') per position
            let ln_s = tape.ln(tape.clamp(s_soft, LOG_EPS, 1.0));
            let cross = tape.sum(tape.mul_const(ln_s, &t_soft));
            let t_entropy: E = t_soft
                .data()
                .iter()
                .fold(E::zero(), |acc, &t| {
                    if t > E::zero() {
                        acc + t * t.ln()
                    } else {
                        acc
                    }
                });
            let contrib = tape.add_scalar(tape.neg(cross), t_entropy.to_f64());
            n_positions += hw;
            total = Some(match total {
                Some(t) => tape.add(t, contrib),
                None => contrib,
            });
        }
    }
    Ok(tape.scale(total.expect("at least one level"), 1.0 / n_positions.max(1) as f64))
}

fn channel_softmax_plain<E: Scalar>(
    logits: &Tensor<E>,
    from: usize,
    to: usize,
    t: E,
) -> Tensor<E> {
    let sh = logits.shape();
    let (h, w) = (sh[1], sh[2]);
    let hw = h * w;
    let c = to - from;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for p in 0..hw {
        let mut mx = E::neg_infinity();
        for ci in 0..c {
            mx = mx.max(logits.data()[(from + ci) * hw + p]);
        }
        let mut sum = E::zero();
        for ci in 0..c {
            let e = ((logits.data()[(from + ci) * hw + p] - mx) / t).exp();
            out.data_mut()[ci * hw + p] = e;
            sum = sum + e;
        }
        for ci in 0..c {
            out.data_mut()[ci * hw + p] = out.data_mut()[ci * hw + p] / sum;
        }
    }
    out
}

/// Position mask for the hand-crafted imitation variants.
pub fn imitation_mask<E: Scalar>(
    mode: FeatureMaskMode,
    level: usize,
    anchors: &AnchorSet,
    assignment: &Assignment,
    gt: &[(BBox, usize)],
) -> Tensor<E> {
    let lv = &anchors.levels[level];
    let (h, w, a) = (lv.h, lv.w, lv.anchors_per_loc);
    let mut mask = Tensor::<E>::zeros(vec![h, w]);
    let off = anchors.level_offset(level);
    match mode {
        FeatureMaskMode::Whole => {
            for v in mask.data_mut() {
                *v = E::one();
            }
        }
        FeatureMaskMode::Positive => {
            for loc in 0..h * w {
                let any_pos = (0..a).any(|ai| {
                    matches!(
                        assignment.status[off + loc * a + ai],
                        AnchorStatus::Positive(_)
                    )
                });
                if any_pos {
                    mask.data_mut()[loc] = E::one();
                }
            }
        }
        FeatureMaskMode::Negative => {
            for loc in 0..h * w {
                let all_neg = (0..a).all(|ai| {
                    matches!(assignment.status[off + loc * a + ai], AnchorStatus::Negative)
                });
                if all_neg {
                    mask.data_mut()[loc] = E::one();
                }
            }
        }
        FeatureMaskMode::Gt => {
            let stride = lv.stride as f32;
            for y in 0..h {
                for x in 0..w {
                    let cx = (x as f32 + 0.5) * stride;
                    let cy = (y as f32 + 0.5) * stride;
                    let inside = gt.iter().any(|(b, _)| {
                        cx >= b.x1 && cx <= b.x2 && cy >= b.y1 && cy <= b.y2
                    });
                    if inside {
                        mask.data_mut()[y * w + x] = E::one();
                    }
                }
            }
        }
        FeatureMaskMode::Pfi => panic!("pfi is not a static mask; use pfi_loss"),
    }
    mask
}

/// Masked FPN feature MSE: (1/L) sum_l (1/(H_l W_l)) sum_{masked,channels}
/// (F_s - F_t)^2. Student features must already be adapter-projected to the
/// teacher's channel count; the teacher side is detached.
pub fn feature_mse_loss<E: Scalar>(
    tape: &Tape<E>,
    student_adapted: &[Var],
    teacher: &[Tensor<E>],
    masks: &[Tensor<E>],
) -> Var {
    assert_eq!(student_adapted.len(), teacher.len());
    assert_eq!(student_adapted.len(), masks.len());
    let nl = teacher.len();
    let mut total: Option<Var> = None;
    for ((sv, tt), mask) in student_adapted.iter().zip(teacher).zip(masks) {
        let sh = tt.shape().to_vec();
        let (q, h, w) = (sh[0], sh[1], sh[2]);
        let diff = tape.add_const(*sv, &tt.map(|v| -v));
        let sq = tape.sqr(diff);
        // Broadcast the [H,W] mask over channels.
        let mut full = Tensor::<E>::zeros(vec![q, h, w]);
        for ci in 0..q {
            full.data_mut()[ci * h * w..(ci + 1) * h * w].copy_from_slice(mask.data());
        }
        let masked = tape.mul_const(sq, &full);
        let s = tape.scale(tape.sum(masked), 1.0 / (h * w) as f64);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    tape.scale(total.expect("at least one level"), 1.0 / nl as f64)
}

/// Trainable 1x1 projection from student FPN channels to the teacher's,
/// shared across levels; trains with the student and is dropped at inference.
#[derive(Clone)]
pub struct FeatureAdapter {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl FeatureAdapter {
    pub fn new(student_channels: usize, teacher_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / student_channels as f32).sqrt();
        let n = teacher_channels * student_channels;
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        FeatureAdapter {
            weight: Tensor::from_vec(vec![teacher_channels, student_channels, 1, 1], data)
                .unwrap(),
            bias: Tensor::zeros(vec![teacher_channels]),
        }
    }

    /// Project each [Q_s,H,W] level to [Q_t,H,W] given the adapter's
    /// parameter vars on the tape.
    pub fn apply<E: Scalar>(
        &self,
        tape: &Tape<E>,
        weight: Var,
        bias: Var,
        features: &[Var],
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(features.len());
        for &f in features {
            let sh = tape.value(f).shape().to_vec();
            let (q, h, w) = (sh[0], sh[1], sh[2]);
            let x = tape.reshape(f, vec![1, q, h, w]);
            let y = tape.conv2d(x, weight, bias, 1, 0)?;
            let qt = tape.value(y).shape()[1];
            out.push(tape.reshape(y, vec![qt, h, w]));
        }
        Ok(out)
    }
}
