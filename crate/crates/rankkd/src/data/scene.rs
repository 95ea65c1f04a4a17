//! Synthetic scenes: colored geometric shapes on a noisy background, with
//! exact bounding boxes.

use crate::detector::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: (usize, usize),
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f32,
    pub max_size: f32,
    pub noise_stddev: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: (96, 96),
            min_shapes: 1,
            max_shapes: 4,
            min_size: 12.0,
            max_size: 48.0,
            noise_stddev: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("need 1 <= min_shapes <= max_shapes".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("bad shape size range".into()));
        }
        if self.max_size > h.min(w) as f32 {
            return Err(Error::Config("shapes would not fit the canvas".into()));
        }
        if self.noise_stddev < 0.0 {
            return Err(Error::Config("noise stddev must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub id: String,
    /// [3,H,W] in [0,1].
    pub image: Tensor<f32>,
    pub gt: Vec<(BBox, usize)>,
}

/// A placed shape; class is implied by the geometry.
#[derive(Clone, Debug)]
pub struct Shape {
    pub class_id: usize,
    pub bbox: BBox,
}

impl Shape {
    /// Whether the pixel centered at (px+0.5, py+0.5) is covered.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f32 + 0.5, py as f32 + 0.5);
        let b = &self.bbox;
        match self.class_id {
            // circle inscribed in the box
            0 => {
                let (cx, cy) = b.center();
                let r = b.width() / 2.0;
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            // filled square
            1 => x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2,
            // upright isoceles triangle: apex top-center, base at the bottom
            2 => {
                if y < b.y1 || y > b.y2 {
                    return false;
                }
                let cx = (b.x1 + b.x2) / 2.0;
                let half = (y - b.y1) / b.height() * (b.width() / 2.0);
                (x - cx).abs() <= half
            }
            _ => unreachable!("unknown class"),
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_GT_IOU: f32 = 0.3;

/// Per-class base colors with per-shape brightness jitter.
const CLASS_COLORS: [[f32; 3]; 3] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.9, 0.2],
    [0.25, 0.35, 0.95],
];

/// Render one scene. Shape boxes are rejection-sampled so every pair of GT
/// boxes overlaps at IoU <= 0.3; exceeding the attempt budget is an error.
pub fn render_scene(spec: &SceneSpec, id: String, rng: &mut ChaCha8Rng) -> Result<AnnotatedImage> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let n_shapes = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes: Vec<Shape> = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let class_id = rng.gen_range(0..3usize);
            // integer corner + integer size keeps square boxes pixel-exact
            let size = rng.gen_range(spec.min_size as usize..=spec.max_size as usize);
            let x0 = rng.gen_range(0..=w - size);
            let y0 = rng.gen_range(0..=h - size);
            let bbox = BBox::new(
                x0 as f32,
                y0 as f32,
                (x0 + size) as f32,
                (y0 + size) as f32,
            );
            if shapes.iter().all(|s| iou(&s.bbox, &bbox) <= MAX_GT_IOU) {
                shapes.push(Shape { class_id, bbox });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place shape within {MAX_PLACEMENT_ATTEMPTS} attempts \
                 (image {id}); relax shape count/size or overlap constraints"
            )));
        }
    }

    let mut image = Tensor::<f32>::zeros(vec![3, h, w]);
    let hw = h * w;
    // noisy gray background
    for p in 0..hw {
        let n = 0.5 + spec.noise_stddev * gaussian(rng);
        for c in 0..3 {
            image.data_mut()[c * hw + p] = n.clamp(0.0, 1.0);
        }
    }
    for shape in &shapes {
        let jitter = rng.gen_range(-0.1..0.1f32);
        let color = CLASS_COLORS[shape.class_id].map(|v| (v + jitter).clamp(0.0, 1.0));
        let (x_lo, x_hi) = (shape.bbox.x1.floor() as usize, shape.bbox.x2.ceil() as usize);
        let (y_lo, y_hi) = (shape.bbox.y1.floor() as usize, shape.bbox.y2.ceil() as usize);
        for py in y_lo..y_hi.min(h) {
            for px in x_lo..x_hi.min(w) {
                if shape.covers(px, py) {
                    for c in 0..3 {
                        image.data_mut()[c * hw + py * w + px] = color[c];
                    }
                }
            }
        }
    }
    let gt = shapes.iter().map(|s| (s.bbox, s.class_id)).collect();
    Ok(AnnotatedImage { id, image, gt })
}

/// Standard normal via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}
