//! How well do feature differences line up with prediction differences?

use crate::distill::types::DifferenceMap;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelInconsistency {
    pub level: usize,
    /// Pearson correlation over positions; None when either map has zero
    /// variance (undefined, deliberately not reported as 0).
    pub correlation: Option<f64>,
    /// Fraction of positions with F_dif above its 90th percentile while
    /// P_dif is below its median: feature-imitation gradient spent where
    /// predictions already agree.
    pub wasted_gradient_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub levels: Vec<LevelInconsistency>,
}

fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Nearest-rank percentile (q in [0,1]) of the values.
fn percentile(values: &[f32], q: f64) -> f32 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[k]
}

pub fn inconsistency_metrics(
    p_dif: &DifferenceMap<f32>,
    f_dif: &DifferenceMap<f32>,
) -> InconsistencyReport {
    assert_eq!(p_dif.levels.len(), f_dif.levels.len());
    let levels = p_dif
        .levels
        .iter()
        .zip(&f_dif.levels)
        .enumerate()
        .map(|(li, (pm, fm))| {
            assert_eq!(pm.shape(), fm.shape());
            let (p, f) = (pm.data(), fm.data());
            let f90 = percentile(f, 0.9);
            let p50 = percentile(p, 0.5);
            let wasted = p
                .iter()
                .zip(f)
                .filter(|&(&pv, &fv)| fv > f90 && pv < p50)
                .count() as f64
                / p.len() as f64;
            LevelInconsistency {
                level: li,
                correlation: pearson(p, f),
                wasted_gradient_fraction: wasted,
            }
        })
        .collect();
    InconsistencyReport { levels }
}
