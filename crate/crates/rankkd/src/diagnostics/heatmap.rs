//! Grayscale heatmaps of prediction/feature difference maps and their
//! elementwise (calibrated) product.

use crate::distill::types::DifferenceMap;
use crate::error::Result;
use crate::numerics::tensor::Tensor;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct LevelHeatmaps {
    pub level: usize,
    pub f_dif: Heatmap,
    pub p_dif: Heatmap,
    /// Product of the two raw maps, normalized after multiplying.
    pub calibrated: Heatmap,
}

/// Min-max normalize a map into 8-bit grayscale. A constant map has no
/// contrast to show and is emitted as all zeros.
fn normalize(map: &Tensor<f32>) -> Heatmap {
    let sh = map.shape();
    let (h, w) = (sh[0], sh[1]);
    let mn = map.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let mx = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let pixels = if mx > mn {
        map.data()
            .iter()
            .map(|&v| ((v - mn) / (mx - mn) * 255.0).round() as u8)
            .collect()
    } else {
        vec![0u8; h * w]
    };
    Heatmap {
        width: w,
        height: h,
        pixels,
    }
}

pub fn difference_heatmaps(
    p_dif: &DifferenceMap<f32>,
    f_dif: &DifferenceMap<f32>,
) -> Vec<LevelHeatmaps> {
    assert_eq!(p_dif.levels.len(), f_dif.levels.len());
    p_dif
        .levels
        .iter()
        .zip(&f_dif.levels)
        .enumerate()
        .map(|(li, (pm, fm))| {
            assert_eq!(pm.shape(), fm.shape());
            let product = pm.zip_map(fm, |p, f| p * f);
            LevelHeatmaps {
                level: li,
                f_dif: normalize(fm),
                p_dif: normalize(pm),
                calibrated: normalize(&product),
            }
        })
        .collect()
}

pub fn write_pgm(path: &Path, map: &Heatmap) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", map.width, map.height)?;
    f.write_all(&map.pixels)?;
    Ok(())
}

/// Write all levels as `{image}_{level}_{kind}.pgm` under `dir`.
pub fn write_heatmaps(dir: &Path, image: &str, levels: &[LevelHeatmaps]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for lv in levels {
        for (kind, map) in [
            ("fdif", &lv.f_dif),
            ("pdif", &lv.p_dif),
            ("calibrated", &lv.calibrated),
        ] {
            write_pgm(&dir.join(format!("{image}_{}_{kind}.pgm", lv.level)), map)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(vec![h, w], data).unwrap()
    }

    #[test]
    fn zero_prediction_difference_zeroes_calibrated() {
        let p = DifferenceMap {
            levels: vec![map(2, 2, vec![0.0; 4])],
        };
        let f = DifferenceMap {
            levels: vec![map(2, 2, vec![1.0, 2.0, 3.0, 4.0])],
        };
        let hm = difference_heatmaps(&p, &f);
        assert_eq!(hm[0].calibrated.pixels, vec![0, 0, 0, 0]);
        // while the raw feature map still has contrast
        assert_eq!(hm[0].f_dif.pixels[3], 255);
    }

    #[test]
    fn hand_product_case() {
        // P=[[0,1],[0,0]], F=[[5,1],[5,5]] -> product [[0,1],[0,0]]
        let p = DifferenceMap {
            levels: vec![map(2, 2, vec![0.0, 1.0, 0.0, 0.0])],
        };
        let f = DifferenceMap {
            levels: vec![map(2, 2, vec![5.0, 1.0, 5.0, 5.0])],
        };
        let hm = difference_heatmaps(&p, &f);
        assert_eq!(hm[0].calibrated.pixels, vec![0, 255, 0, 0]);
    }

    #[test]
    fn constant_map_is_all_zeros() {
        let c = DifferenceMap {
            levels: vec![map(1, 3, vec![0.7, 0.7, 0.7])],
        };
        let hm = difference_heatmaps(&c, &c);
        assert_eq!(hm[0].p_dif.pixels, vec![0, 0, 0]);
    }

    #[test]
    fn pgm_round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = DifferenceMap {
            levels: vec![map(2, 2, vec![0.0, 0.5, 0.25, 1.0])],
        };
        let hm = difference_heatmaps(&p, &p);
        write_heatmaps(dir.path(), "img0", &hm).unwrap();
        let path = dir.path().join("img0_0_pdif.pgm");
        let a = std::fs::read(&path).unwrap();
        assert!(a.starts_with(b"P5\n2 2\n255\n"));
        write_heatmaps(dir.path(), "img0", &hm).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(a, b);
    }
}
