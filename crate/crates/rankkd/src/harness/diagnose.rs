//! Teacher-vs-student diagnostics over a dataset: anchor agreement, rank
//! KL, difference heatmaps, and the feature/prediction mismatch metrics.

use crate::data::scene::AnnotatedImage;
use crate::detector::anchors::{assign_labels, generate_anchors, AnchorSet};
use crate::detector::eval::detect;
use crate::detector::model::DetectorModel;
use crate::diagnostics::agreement::{
    rank_csv_rows, top_anchor_agreement, AgreementReport, RANK_CSV_HEADER,
};
use crate::diagnostics::heatmap::{difference_heatmaps, write_heatmaps};
use crate::diagnostics::inconsistency::{inconsistency_metrics, InconsistencyReport};
use crate::distill::pfi::prediction_difference;
use crate::distill::types::DifferenceMap;
use crate::distill::rank::extract_instance_scores;
use crate::error::{Error, Result};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_HEATMAP_IMAGES: usize = 16;

/// Detached per-level outputs of one model on one image.
pub struct ModelOutputs {
    pub cls_prob: Vec<Tensor<f32>>,
    pub reg: Vec<Tensor<f32>>,
    pub feats: Vec<Tensor<f32>>,
}

pub fn detached_forward(model: &DetectorModel, image: &Tensor<f32>) -> Result<ModelOutputs> {
    let tape = Tape::new();
    let (preds, feats, _) = model.forward(&tape, image)?;
    let grab = |v| (*tape.value(v)).clone();
    Ok(ModelOutputs {
        cls_prob: preds.levels.iter().map(|l| grab(l.cls_prob)).collect(),
        reg: preds.levels.iter().map(|l| grab(l.reg)).collect(),
        feats: feats.levels.iter().map(|&f| grab(f)).collect(),
    })
}

/// Least-squares 1x1 projection (with bias) of student channels onto the
/// teacher's, fitted over all positions of all given pyramids. Makes the
/// feature-difference map meaningful when the two widths differ, without
/// depending on any trained adapter.
pub fn fit_linear_projection(
    student: &[Vec<Tensor<f32>>],
    teacher: &[Vec<Tensor<f32>>],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let qs = student[0][0].shape()[0];
    let qt = teacher[0][0].shape()[0];
    let d = qs + 1; // augmented with the bias column
    let mut xtx = vec![vec![0.0f64; d]; d];
    let mut xty = vec![vec![0.0f64; qt]; d];
    for (sp, tp) in student.iter().zip(teacher) {
        for (sl, tl) in sp.iter().zip(tp) {
            let hw = sl.shape()[1] * sl.shape()[2];
            for p in 0..hw {
                let mut x = Vec::with_capacity(d);
                for q in 0..qs {
                    x.push(sl.data()[q * hw + p] as f64);
                }
                x.push(1.0);
                for i in 0..d {
                    for j in 0..d {
                        xtx[i][j] += x[i] * x[j];
                    }
                    for k in 0..qt {
                        xty[i][k] += x[i] * tl.data()[k * hw + p] as f64;
                    }
                }
            }
        }
    }
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-6; // tiny ridge so degenerate features stay solvable
    }
    let sol = solve_multi(xtx, xty)?;
    let mut weight = vec![vec![0.0f64; qs]; qt];
    let mut bias = vec![0.0f64; qt];
    for k in 0..qt {
        for q in 0..qs {
            weight[k][q] = sol[q][k];
        }
        bias[k] = sol[qs][k];
    }
    Ok((weight, bias))
}

/// Gaussian elimination with partial pivoting; solves A X = B for X.
fn solve_multi(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let m = b[0].len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::NonFinite("singular projection system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..m {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    for i in 0..n {
        let p = a[i][i];
        for k in 0..m {
            b[i][k] /= p;
        }
    }
    Ok(b)
}

/// Per-position mean squared difference between the projected student
/// features and the teacher's, per level.
fn projected_feature_difference(
    student: &[Tensor<f32>],
    teacher: &[Tensor<f32>],
    weight: &[Vec<f64>],
    bias: &[f64],
) -> DifferenceMap<f32> {
    let qt = teacher[0].shape()[0];
    let qs = student[0].shape()[0];
    let levels = student
        .iter()
        .zip(teacher)
        .map(|(sl, tl)| {
            let (h, w) = (sl.shape()[1], sl.shape()[2]);
            let hw = h * w;
            let mut out = Tensor::<f32>::zeros(vec![h, w]);
            for p in 0..hw {
                let mut acc = 0.0f64;
                for k in 0..qt {
                    let mut proj = bias[k];
                    for q in 0..qs {
                        proj += weight[k][q] * sl.data()[q * hw + p] as f64;
                    }
                    let diff = proj - tl.data()[k * hw + p] as f64;
                    acc += diff * diff;
                }
                out.data_mut()[p] = (acc / qt as f64) as f32;
            }
            out
        })
        .collect();
    DifferenceMap { levels }
}

#[derive(Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub images: usize,
    pub top1_agreement_rate: f32,
    pub compared: usize,
    pub both_missed: usize,
    pub mean_rank_kl: f32,
    pub per_image: Vec<(String, AgreementReport)>,
}

pub struct DiagnoseArtifacts {
    pub summary: DiagnoseSummary,
    pub inconsistency: InconsistencyReport,
}

/// Run both models over the dataset; write agreement.json, rank.csv,
/// inconsistency.json, and heatmaps for the first `heatmap_images` images.
pub fn diagnose(
    teacher: &DetectorModel,
    student: &DetectorModel,
    images: &[&AnnotatedImage],
    out: &Path,
    heatmap_images: usize,
) -> Result<DiagnoseArtifacts> {
    if images.is_empty() {
        return Err(Error::Usage("diagnose needs at least one image".into()));
    }
    if teacher.config.strides != student.config.strides
        || teacher.config.num_classes != student.config.num_classes
        || teacher.config.anchors_per_loc != student.config.anchors_per_loc
        || teacher.config.anchor_scale != student.config.anchor_scale
    {
        return Err(Error::Config(
            "teacher and student anchor grids are incompatible".into(),
        ));
    }
    let k = if heatmap_images > images.len() {
        eprintln!(
            "note: only {} images available; clamping heatmap count from {heatmap_images}",
            images.len()
        );
        images.len()
    } else {
        heatmap_images
    };
    std::fs::create_dir_all(out)?;
    let sh = images[0].image.shape();
    let anchors: AnchorSet = generate_anchors(&teacher.config, (sh[1], sh[2]))?;
    let c = teacher.config.num_classes;

    let mut per_image = Vec::with_capacity(images.len());
    let (mut compared, mut agreed, mut both_missed) = (0usize, 0usize, 0usize);
    let (mut kl_sum, mut kl_n) = (0.0f64, 0usize);
    let mut csv = String::from(RANK_CSV_HEADER);
    let mut s_feats_all = Vec::with_capacity(images.len());
    let mut t_feats_all = Vec::with_capacity(images.len());
    let mut p_difs = Vec::with_capacity(images.len());

    for img in images {
        let t_out = detached_forward(teacher, &img.image)?;
        let s_out = detached_forward(student, &img.image)?;
        let assignment = assign_labels(&anchors, &img.gt);
        let t_scores =
            extract_instance_scores(&t_out.cls_prob, &t_out.reg, &anchors, &assignment, &img.gt, c);
        let s_scores =
            extract_instance_scores(&s_out.cls_prob, &s_out.reg, &anchors, &assignment, &img.gt, c);
        let t_dets = detect(teacher, &anchors, &img.image)?;
        let s_dets = detect(student, &anchors, &img.image)?;
        let report =
            top_anchor_agreement(&t_dets, &s_dets, &t_scores, &s_scores, &img.gt, 0.5);
        for inst in &report.instances {
            if let Some(kl) = inst.rank_kl {
                kl_sum += kl as f64;
                kl_n += 1;
            }
        }
        compared += report.compared;
        both_missed += report.both_missed;
        agreed += (report.top1_agreement_rate * report.compared as f32).round() as usize;
        rank_csv_rows(&img.id, &report, &mut csv);
        per_image.push((img.id.clone(), report));
        p_difs.push(prediction_difference(&s_out.cls_prob, &t_out.cls_prob));
        s_feats_all.push(s_out.feats);
        t_feats_all.push(t_out.feats);
    }

    let (weight, bias) = fit_linear_projection(&s_feats_all, &t_feats_all)?;
    let nlevels = t_feats_all[0].len();
    let mut f_difs = Vec::with_capacity(images.len());
    for (sf, tf) in s_feats_all.iter().zip(&t_feats_all) {
        f_difs.push(projected_feature_difference(sf, tf, &weight, &bias));
    }

    for (i, img) in images.iter().take(k).enumerate() {
        let hm = difference_heatmaps(&p_difs[i], &f_difs[i]);
        write_heatmaps(&out.join("heatmaps"), &img.id, &hm)?;
    }

    // Pool positions across images per level for the aggregate metrics.
    let stack = |maps: &[DifferenceMap<f32>]| -> DifferenceMap<f32> {
        let levels = (0..nlevels)
            .map(|li| {
                let w = maps[0].levels[li].shape()[1];
                let mut data = Vec::new();
                for m in maps {
                    data.extend_from_slice(m.levels[li].data());
                }
                let h = data.len() / w;
                Tensor::from_vec(vec![h, w], data).unwrap()
            })
            .collect();
        DifferenceMap { levels }
    };
    let inconsistency = inconsistency_metrics(&stack(&p_difs), &stack(&f_difs));

    let summary = DiagnoseSummary {
        images: images.len(),
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
        per_image,
    };
    std::fs::write(
        out.join("agreement.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    std::fs::write(
        out.join("inconsistency.json"),
        serde_json::to_string_pretty(&inconsistency)? + "\n",
    )?;
    std::fs::write(out.join("rank.csv"), csv)?;
    Ok(DiagnoseArtifacts {
        summary,
        inconsistency,
    })
}
