//! Do teacher and student pick their final boxes from the same anchors?

use crate::detector::boxes::{iou, BBox, Detection};
use crate::distill::rank::rank_distribution;
use crate::distill::types::InstanceAnchorScores;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceAgreement {
    pub gt_instance: usize,
    pub teacher_top_anchor: Option<usize>,
    pub student_top_anchor: Option<usize>,
    /// Both matched and via the same source anchor.
    pub agree: bool,
    /// Number of positive anchors backing the rank distributions.
    pub num_anchors: usize,
    /// KL(teacher rank dist || student rank dist) over the instance's
    /// positive anchors; absent when the instance has none.
    pub rank_kl: Option<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgreementReport {
    pub instances: Vec<InstanceAgreement>,
    /// Over GT matched by both models.
    pub top1_agreement_rate: f32,
    pub compared: usize,
    pub both_missed: usize,
    pub mean_rank_kl: f32,
}

/// Highest-IoU detection of the right class overlapping each GT at >=
/// `iou_match`; None when missed.
fn match_gt(dets: &[Detection], gt: &[(BBox, usize)], iou_match: f32) -> Vec<Option<usize>> {
    gt.iter()
        .map(|(gbox, gclass)| {
            let mut best: Option<(f32, usize)> = None;
            for (di, d) in dets.iter().enumerate() {
                if d.class_id != *gclass {
                    continue;
                }
                let ov = iou(&d.box_, gbox);
                if ov >= iou_match && best.is_none_or(|(b, _)| ov > b) {
                    best = Some((ov, di));
                }
            }
            best.map(|(_, di)| di)
        })
        .collect()
}

/// Compare which anchor each model's best box for every GT came from, and
/// how far apart the two rank distributions are. GT matched by neither
/// model are excluded from the rate (reported as `both_missed`); GT matched
/// by only one model are excluded as well.
pub fn top_anchor_agreement(
    teacher_dets: &[Detection],
    student_dets: &[Detection],
    teacher_scores: &[InstanceAnchorScores],
    student_scores: &[InstanceAnchorScores],
    gt: &[(BBox, usize)],
    iou_match: f32,
) -> AgreementReport {
    let t_match = match_gt(teacher_dets, gt, iou_match);
    let s_match = match_gt(student_dets, gt, iou_match);
    let mut instances = Vec::with_capacity(gt.len());
    let (mut compared, mut agreed, mut both_missed) = (0usize, 0usize, 0usize);
    let mut kl_sum = 0.0f64;
    let mut kl_n = 0usize;
    for gi in 0..gt.len() {
        let t_anchor = t_match[gi].map(|di| teacher_dets[di].source_anchor);
        let s_anchor = s_match[gi].map(|di| student_dets[di].source_anchor);
        let agree = match (t_anchor, s_anchor) {
            (Some(t), Some(s)) => {
                compared += 1;
                if t == s {
                    agreed += 1;
                }
                t == s
            }
            (None, None) => {
                both_missed += 1;
                false
            }
            _ => false,
        };
        let rank_kl = instance_rank_kl(teacher_scores, student_scores, gi);
        if let Some(kl) = rank_kl {
            kl_sum += kl as f64;
            kl_n += 1;
        }
        let num_anchors = teacher_scores
            .iter()
            .find(|s| s.instance == gi)
            .map_or(0, |s| s.scores.len());
        instances.push(InstanceAgreement {
            gt_instance: gi,
            teacher_top_anchor: t_anchor,
            student_top_anchor: s_anchor,
            agree,
            num_anchors,
            rank_kl,
        });
    }
    AgreementReport {
        instances,
        top1_agreement_rate: if compared == 0 {
            0.0
        } else {
            agreed as f32 / compared as f32
        },
        compared,
        both_missed,
        mean_rank_kl: if kl_n == 0 {
            0.0
        } else {
            (kl_sum / kl_n as f64) as f32
        },
    }
}

fn instance_rank_kl(
    teacher: &[InstanceAnchorScores],
    student: &[InstanceAnchorScores],
    gi: usize,
) -> Option<f32> {
    let t = teacher.iter().find(|s| s.instance == gi)?;
    let s = student.iter().find(|s| s.instance == gi)?;
    if t.scores.is_empty() || t.scores.len() != s.scores.len() {
        return None;
    }
    let p = rank_distribution(&t.scores).probs;
    let q = rank_distribution(&s.scores).probs;
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi as f64 * (pi as f64 / (qi as f64).max(1e-12)).ln()
            } else {
                0.0
            }
        })
        .sum();
    Some(kl as f32)
}

/// CSV rows for per-instance rank data: image, instance, N, kl, tops.
pub fn rank_csv_rows(image: &str, report: &AgreementReport, out: &mut String) {
    for inst in &report.instances {
        let fmt_anchor = |a: Option<usize>| {
            a.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
        };
        out.push_str(&format!(
            "{image},{},{},{},{},{}\n",
            inst.gt_instance,
            inst.num_anchors,
            inst.rank_kl.map_or_else(|| "-".into(), |k| format!("{k:.6}")),
            fmt_anchor(inst.teacher_top_anchor),
            fmt_anchor(inst.student_top_anchor),
        ));
    }
}

pub const RANK_CSV_HEADER: &str = "image,instance,n,kl,teacher_top,student_top\n";
