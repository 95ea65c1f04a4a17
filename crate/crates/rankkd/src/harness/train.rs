//! Training loop: task losses plus optional distillation terms, SGD with
//! momentum and a step lr schedule, per-epoch checkpoints.

use crate::data::dataset::{load_dataset, splitmix64};
use crate::data::scene::AnnotatedImage;
use crate::detector::anchors::{assign_labels, generate_anchors, AnchorSet};
use crate::detector::boxes::BBox;
use crate::detector::eval::ApReport;
use crate::detector::losses::{focal_loss, smooth_l1_loss};
use crate::detector::model::DetectorModel;
use crate::distill::classic::{feature_mse_loss, imitation_mask, soft_label_loss, FeatureAdapter};
use crate::distill::pfi::{feature_difference, pfi_loss, prediction_difference};
use crate::distill::rank::{extract_instance_scores, instance_score_vars, rank_mimicking_loss};
use crate::distill::types::FeatureMaskMode;
use crate::error::{Error, Result};
use crate::harness::config::{Role, RunConfig};
use crate::harness::evalcmd::eval_model;
use crate::numerics::sgd::{sgd_step, SgdState};
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;
/// Logged components must reassemble into the logged total this tightly.
const PARTITION_TOL: f32 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub task: f32,
    pub soft: f32,
    pub rm: f32,
    pub pfi: f32,
    pub total: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub role: Role,
    pub epochs: Vec<EpochStats>,
    pub val: ApReport,
}

/// Detached teacher outputs for one image.
struct TeacherOutputs {
    cls_prob: Vec<Tensor<f32>>,
    cls_logits: Vec<Tensor<f32>>,
    reg: Vec<Tensor<f32>>,
    feats: Vec<Tensor<f32>>,
}

fn teacher_forward(teacher: &DetectorModel, image: &Tensor<f32>) -> Result<TeacherOutputs> {
    let tape = Tape::new();
    let (preds, feats, _) = teacher.forward(&tape, image)?;
    let grab = |v| (*tape.value(v)).clone();
    Ok(TeacherOutputs {
        cls_prob: preds.levels.iter().map(|l| grab(l.cls_prob)).collect(),
        cls_logits: preds.levels.iter().map(|l| grab(l.cls_logits)).collect(),
        reg: preds.levels.iter().map(|l| grab(l.reg)).collect(),
        feats: feats.levels.iter().map(|&f| grab(f)).collect(),
    })
}

pub fn hflip(image: &Tensor<f32>, gt: &[(BBox, usize)]) -> (Tensor<f32>, Vec<(BBox, usize)>) {
    let sh = image.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut out = Tensor::<f32>::zeros(sh.to_vec());
    for ci in 0..c {
        for y in 0..h {
            let row = ci * h * w + y * w;
            for x in 0..w {
                out.data_mut()[row + x] = image.data()[row + (w - 1 - x)];
            }
        }
    }
    let gt = gt
        .iter()
        .map(|&(b, cls)| (BBox::new(w as f32 - b.x2, b.y1, w as f32 - b.x1, b.y2), cls))
        .collect();
    (out, gt)
}

struct StepLosses {
    task: f32,
    soft: f32,
    rm: f32,
    pfi: f32,
    total: f32,
}

#[allow(clippy::too_many_arguments)]
fn image_step(
    cfg: &RunConfig,
    model: &DetectorModel,
    teacher: Option<&DetectorModel>,
    adapter: Option<&FeatureAdapter>,
    anchors: &AnchorSet,
    image: &Tensor<f32>,
    gt: &[(BBox, usize)],
    inv_batch: f64,
    grads: &mut [Tensor<f32>],
) -> Result<StepLosses> {
    let c = cfg.model.num_classes;
    let tape = Tape::new();
    let (preds, feats, pvars) = model.forward(&tape, image)?;
    let adapter_vars = adapter.map(|a| (tape.param(a.weight.clone()), tape.param(a.bias.clone())));

    let assignment = assign_labels(anchors, gt);
    let gt_classes: Vec<usize> = gt.iter().map(|g| g.1).collect();
    let cls_probs: Vec<_> = preds.levels.iter().map(|l| l.cls_prob).collect();
    let reg_maps: Vec<_> = preds.levels.iter().map(|l| l.reg).collect();

    let focal = focal_loss(
        &tape, &cls_probs, anchors, &assignment, &gt_classes, c, FOCAL_ALPHA, FOCAL_GAMMA,
    );
    let l1 = smooth_l1_loss(&tape, &reg_maps, anchors, &assignment, gt);
    let task = tape.add(focal, l1);

    let t_out = teacher.map(|t| teacher_forward(t, image)).transpose()?;

    let d = &cfg.distill;
    let mut total = task;
    let mut soft_val = 0.0f32;
    let mut rm_val = 0.0f32;
    let mut pfi_val = 0.0f32;

    if let Some(t_out) = &t_out {
        if d.soft_label_weight > 0.0 {
            let logits: Vec<_> = preds.levels.iter().map(|l| l.cls_logits).collect();
            let soft = soft_label_loss(
                &tape,
                &logits,
                &t_out.cls_logits,
                cfg.model.anchors_per_loc,
                c,
                d.temperature as f64,
            )?;
            soft_val = tape.value(soft).item();
            total = tape.add(total, tape.scale(soft, d.soft_label_weight as f64));
        }
        if d.alpha > 0.0 {
            let student_iv =
                instance_score_vars(&tape, &cls_probs, &reg_maps, anchors, &assignment, gt, c);
            let teacher_is = extract_instance_scores(
                &t_out.cls_prob, &t_out.reg, anchors, &assignment, gt, c,
            );
            let rm = rank_mimicking_loss(
                &tape,
                &student_iv,
                &teacher_is,
                d.rank_mode,
                d.loc_rank_weight as f64,
            )?;
            rm_val = tape.value(rm).item();
            total = tape.add(total, tape.scale(rm, d.alpha as f64));
        }
        if d.beta > 0.0 {
            let (wv, bv) = adapter_vars.expect("adapter required for feature terms");
            let adapted = adapter
                .unwrap()
                .apply(&tape, wv, bv, &feats.levels)?;
            let fi = match d.feature_mask {
                FeatureMaskMode::Pfi => {
                    let s_prob: Vec<Tensor<f32>> = preds
                        .levels
                        .iter()
                        .map(|l| (*tape.value(l.cls_prob)).clone())
                        .collect();
                    let p_dif = prediction_difference(&s_prob, &t_out.cls_prob);
                    let f_dif = feature_difference(&tape, &adapted, &t_out.feats);
                    pfi_loss(&tape, &p_dif, &f_dif, d.pfi_form)
                }
                mode => {
                    let masks: Vec<Tensor<f32>> = (0..anchors.levels.len())
                        .map(|li| imitation_mask(mode, li, anchors, &assignment, gt))
                        .collect();
                    feature_mse_loss(&tape, &adapted, &t_out.feats, &masks)
                }
            };
            pfi_val = tape.value(fi).item();
            total = tape.add(total, tape.scale(fi, d.beta as f64));
        }
    }

    let losses = StepLosses {
        task: tape.value(task).item(),
        soft: soft_val,
        rm: rm_val,
        pfi: pfi_val,
        total: tape.value(total).item(),
    };
    for (name, v) in [
        ("task", losses.task),
        ("soft", losses.soft),
        ("rm", losses.rm),
        ("pfi", losses.pfi),
        ("total", losses.total),
    ] {
        if !v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite {name} loss (task={} soft={} rm={} pfi={})",
                losses.task, losses.soft, losses.rm, losses.pfi
            )));
        }
    }
    let reassembled = losses.task
        + d.soft_label_weight * losses.soft
        + d.alpha * losses.rm
        + d.beta * losses.pfi;
    debug_assert!(
        (reassembled - losses.total).abs() <= PARTITION_TOL * losses.total.abs().max(1.0),
        "loss components do not partition the total"
    );

    let g = tape.backward(tape.scale(total, inv_batch));
    let mut slot = 0usize;
    for &pv in &pvars {
        if let Some(gt_) = g.wrt(pv) {
            for (acc, &gv) in grads[slot].data_mut().iter_mut().zip(gt_.data()) {
                *acc += gv;
            }
        }
        slot += 1;
    }
    if let Some((wv, bv)) = adapter_vars {
        for pv in [wv, bv] {
            if let Some(gt_) = g.wrt(pv) {
                for (acc, &gv) in grads[slot].data_mut().iter_mut().zip(gt_.data()) {
                    *acc += gv;
                }
            }
            slot += 1;
        }
    }
    Ok(losses)
}

pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;

    let train_set = load_dataset(&cfg.train_dir)?;
    let val_set = load_dataset(&cfg.val_dir)?;
    if train_set.is_empty() {
        return Err(Error::Usage(format!(
            "no training images under {}",
            cfg.train_dir.display()
        )));
    }
    let sh = train_set[0].image.shape();
    let image_size = (sh[1], sh[2]);
    let anchors = generate_anchors(&cfg.model, image_size)?;

    let teacher = match &cfg.teacher {
        Some(path) if cfg.distills() => {
            let t = DetectorModel::load(path)?;
            let tc = &t.config;
            let mc = &cfg.model;
            if tc.strides != mc.strides
                || tc.num_classes != mc.num_classes
                || tc.anchors_per_loc != mc.anchors_per_loc
                || tc.anchor_scale != mc.anchor_scale
            {
                return Err(Error::Config(format!(
                    "teacher grid {tc:?} incompatible with student {mc:?}"
                )));
            }
            Some(t)
        }
        _ => None,
    };

    let mut model = DetectorModel::new(cfg.model.clone(), cfg.seed)?;
    let mut adapter = match (&teacher, cfg.distill.beta > 0.0) {
        (Some(t), true) => Some(FeatureAdapter::new(
            cfg.model.width,
            t.config.width,
            splitmix64(cfg.seed, 0xADA9),
        )),
        _ => None,
    };

    let mut state = SgdState::new();
    let mut epochs_out = Vec::with_capacity(cfg.optimizer.epochs);
    let started = Instant::now();

    let mut global_step = 0usize;
    for epoch in 1..=cfg.optimizer.epochs {
        let drops = cfg.optimizer.lr_drops.iter().filter(|&&d| epoch >= d).count();
        let epoch_lr = cfg.optimizer.lr * 0.1f32.powi(drops as i32);

        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed, 0xE000 + epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let (mut sums, mut steps) = ([0.0f64; 5], 0usize);
        for batch in order.chunks(cfg.optimizer.batch) {
            let mut grads: Vec<Tensor<f32>> = model
                .params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect();
            if let Some(a) = &adapter {
                grads.push(Tensor::zeros(a.weight.shape().to_vec()));
                grads.push(Tensor::zeros(a.bias.shape().to_vec()));
            }
            let inv_batch = 1.0 / batch.len() as f64;
            let mut batch_losses = [0.0f64; 5];
            for &idx in batch {
                let img = &train_set[idx];
                let flip = rng.gen::<f32>() < cfg.optimizer.flip_prob;
                let (image, gt) = if flip {
                    hflip(&img.image, &img.gt)
                } else {
                    (img.image.clone(), img.gt.clone())
                };
                let losses = image_step(
                    cfg,
                    &model,
                    teacher.as_ref(),
                    adapter.as_ref(),
                    &anchors,
                    &image,
                    &gt,
                    inv_batch,
                    &mut grads,
                )
                .map_err(|e| {
                    Error::Training(format!(
                        "epoch {epoch}, image {}: {e}; last-good checkpoint is {}",
                        img.id,
                        checkpoint_name(epoch.saturating_sub(1))
                    ))
                })?;
                for (s, v) in batch_losses.iter_mut().zip([
                    losses.task,
                    losses.soft,
                    losses.rm,
                    losses.pfi,
                    losses.total,
                ]) {
                    *s += v as f64 * inv_batch;
                }
            }
            let mut flat: Vec<Tensor<f32>> =
                model.params.iter().map(|(_, t)| t.clone()).collect();
            if let Some(a) = &adapter {
                flat.push(a.weight.clone());
                flat.push(a.bias.clone());
            }
            let lr = if global_step < cfg.optimizer.warmup_steps {
                let f = cfg.optimizer.warmup_factor;
                let t = global_step as f32 / cfg.optimizer.warmup_steps as f32;
                epoch_lr * (f + (1.0 - f) * t)
            } else {
                epoch_lr
            };
            global_step += 1;
            clip_grad_norm(&mut grads, cfg.optimizer.max_grad_norm);
            sgd_step(&mut flat, &grads, &mut state, lr, cfg.optimizer.momentum);
            for ((_, t), updated) in model.params.iter_mut().zip(&flat) {
                *t = updated.clone();
            }
            if let Some(a) = &mut adapter {
                a.bias = flat.pop().unwrap();
                a.weight = flat.pop().unwrap();
            }
            for (s, v) in sums.iter_mut().zip(batch_losses) {
                *s += v;
            }
            steps += 1;
        }

        model.save(&cfg.out.join(checkpoint_name(epoch)))?;
        let n = steps.max(1) as f64;
        epochs_out.push(EpochStats {
            epoch,
            lr: epoch_lr,
            task: (sums[0] / n) as f32,
            soft: (sums[1] / n) as f32,
            rm: (sums[2] / n) as f32,
            pfi: (sums[3] / n) as f32,
            total: (sums[4] / n) as f32,
        });
    }

    model.save(&cfg.out.join("final.tdmp"))?;
    let val_refs: Vec<&AnnotatedImage> = val_set.iter().collect();
    let (_, ap) = eval_model(&model, &val_refs)?;
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        role: cfg.role,
        epochs: epochs_out,
        val: ap,
    };
    write_report(&cfg.out, &report)?;
    // timing kept out of report.json so reports stay byte-reproducible
    std::fs::write(
        cfg.out.join("timing.txt"),
        format!("wall_clock_secs = {:.3}\n", started.elapsed().as_secs_f64()),
    )?;
    Ok(report)
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`
/// (0 disables). Keeps rare gradient spikes from diverging the run.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm as f64 {
        let s = max_norm as f64 / norm;
        for g in grads {
            for v in g.data_mut() {
                *v = (*v as f64 * s) as f32;
            }
        }
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:03}.tdmp")
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    Ok(())
}
