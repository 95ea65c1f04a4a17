//! Deterministic synthetic shapes dataset and its on-disk formats.

pub mod dataset;
pub mod scene;

pub use dataset::{
    generate_dataset, load_dataset, load_spec, read_ppm, splitmix64, write_ppm,
};
pub use scene::{render_scene, AnnotatedImage, SceneSpec, Shape, CLASS_NAMES};
