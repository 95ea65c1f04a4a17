//! On-disk dataset layout: images/*.ppm + annotations.jsonl + spec.json.

use crate::data::scene::{render_scene, AnnotatedImage, SceneSpec};
use crate::detector::boxes::BBox;
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Independent per-image stream seeds from one master seed.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    boxes: Vec<[f32; 4]>,
    labels: Vec<usize>,
}

/// Write a [3,H,W] image in [0,1] as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let sh = image.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::Dimension(format!("expected [3,H,W] image, got {sh:?}")));
    }
    let (h, w) = (sh[1], sh[2]);
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw + 32);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for p in 0..hw {
        for c in 0..3 {
            buf.push((image.data()[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let named = |m: &str| Error::Load(format!("{}: {m}", path.display()));
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| named(&e.to_string()))?
        .read_to_end(&mut bytes)?;
    // header: P6, whitespace-separated width height maxval, one whitespace
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(named("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| named("bad header"))?);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(named("not a P6/255 ppm"));
    }
    let w: usize = fields[1].parse().map_err(|_| named("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| named("bad height"))?;
    let hw = h * w;
    if bytes.len() < pos + 3 * hw {
        return Err(named("truncated pixel data"));
    }
    let mut image = Tensor::<f32>::zeros(vec![3, h, w]);
    for p in 0..hw {
        for c in 0..3 {
            image.data_mut()[c * hw + p] = bytes[pos + 3 * p + c] as f32 / 255.0;
        }
    }
    Ok(image)
}

/// Generate `count` scenes under `dir`: images/, annotations.jsonl, and the
/// spec itself as spec.json. Byte-deterministic in (spec, count).
pub fn generate_dataset(spec: &SceneSpec, count: usize, dir: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("dataset count must be >= 1".into()));
    }
    spec.validate()?;
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut annotations = String::new();
    for i in 0..count {
        let id = format!("img_{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed, i as u64));
        let scene = render_scene(spec, id.clone(), &mut rng)?;
        write_ppm(&images_dir.join(format!("{id}.ppm")), &scene.image)?;
        let line = AnnotationLine {
            id,
            boxes: scene.gt.iter().map(|(b, _)| [b.x1, b.y1, b.x2, b.y2]).collect(),
            labels: scene.gt.iter().map(|&(_, c)| c).collect(),
        };
        annotations.push_str(&serde_json::to_string(&line)?);
        annotations.push('\n');
    }
    std::fs::write(dir.join("annotations.jsonl"), annotations)?;
    let mut f = std::fs::File::create(dir.join("spec.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

/// Load a dataset directory in lexicographic id order. A directory with no
/// annotation file is an empty dataset, not an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let ann_path = dir.join("annotations.jsonl");
    if !ann_path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&ann_path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: AnnotationLine = serde_json::from_str(line).map_err(|e| {
            Error::Load(format!(
                "{}:{}: malformed annotation: {e}",
                ann_path.display(),
                lineno + 1
            ))
        })?;
        if ann.boxes.len() != ann.labels.len() {
            return Err(Error::Load(format!(
                "{}:{}: {} boxes but {} labels",
                ann_path.display(),
                lineno + 1,
                ann.boxes.len(),
                ann.labels.len()
            )));
        }
        let image = read_ppm(&dir.join("images").join(format!("{}.ppm", ann.id)))?;
        let gt = ann
            .boxes
            .iter()
            .zip(&ann.labels)
            .map(|(b, &c)| (BBox::new(b[0], b[1], b[2], b[3]), c))
            .collect();
        out.push(AnnotatedImage { id: ann.id, image, gt });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn load_spec(dir: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(dir.join("spec.json"))?;
    Ok(serde_json::from_str(&text)?)
}
