//! Checkpoint evaluation: detections plus VOC-style AP@0.5, parallel over
//! images.

use crate::data::scene::AnnotatedImage;
use crate::detector::anchors::generate_anchors;
use crate::detector::boxes::Detection;
use crate::detector::eval::{detect, detection_records, evaluate_ap, ApReport};
use crate::detector::model::DetectorModel;
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::path::Path;

pub const EVAL_IOU: f32 = 0.5;

/// Thread cap for evaluation; defaults to the rayon default.
pub const THREADS_ENV: &str = "RANKDISTILL_THREADS";

fn eval_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Detections per image (in input order) and the AP report.
pub fn eval_model(
    model: &DetectorModel,
    images: &[&AnnotatedImage],
) -> Result<(Vec<(String, Vec<Detection>)>, ApReport)> {
    if images.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let sh = images[0].image.shape();
    let anchors = generate_anchors(&model.config, (sh[1], sh[2]))?;
    let detections: Vec<(String, Vec<Detection>)> = eval_pool()?.install(|| {
        images
            .par_iter()
            .map(|img| Ok((img.id.clone(), detect(model, &anchors, &img.image)?)))
            .collect::<Result<_>>()
    })?;
    let gt: Vec<(String, Vec<_>)> = images
        .iter()
        .map(|img| (img.id.clone(), img.gt.clone()))
        .collect();
    let report = evaluate_ap(&detections, &gt, EVAL_IOU);
    Ok((detections, report))
}

/// Write eval artifacts: ap.json, ap.csv, detections.jsonl.
pub fn write_eval_artifacts(
    dir: &Path,
    detections: &[(String, Vec<Detection>)],
    report: &ApReport,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("ap.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    let mut csv = String::from("class,ap\n");
    for (class, ap) in &report.per_class {
        csv.push_str(&format!("{class},{ap:.6}\n"));
    }
    csv.push_str(&format!("map,{:.6}\n", report.map));
    std::fs::write(dir.join("ap.csv"), csv)?;
    let mut jsonl = String::new();
    for rec in detection_records(detections) {
        jsonl.push_str(&serde_json::to_string(&rec)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("detections.jsonl"), jsonl)?;
    Ok(())
}
