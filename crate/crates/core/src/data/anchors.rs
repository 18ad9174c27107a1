use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// IoU of two boxes sharing a corner, from their widths and heights.
pub fn wh_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    inter / (a[0] * a[1] + b[0] * b[1] - inter)
}

/// k-means over box shapes with distance `1 − IoU`, seeded k-means++
/// initialisation. Returns `per_scale` groups of `k_per_scale` anchors,
/// sorted by area from the finest scale to the coarsest.
pub fn kmeans_anchors(shapes: &[[f64; 2]], per_scale: usize, k_per_scale: usize, seed: u64) -> Result<Vec<Vec<[f32; 2]>>> {
    let k = per_scale * k_per_scale;
    if k == 0 {
        return Err(Error::Invalid("anchor count must be positive".into()));
    }
    if shapes.len() < k {
        return Err(Error::Invalid(format!("{} boxes cannot seed {k} anchors", shapes.len())));
    }
    if shapes.iter().any(|s| !(s[0] > 0.0 && s[1] > 0.0)) {
        return Err(Error::Invalid("box shapes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![shapes[rng.gen_range(0..shapes.len())]];
    while centers.len() < k {
        let d: Vec<f64> = shapes
            .iter()
            .map(|s| centers.iter().map(|c| 1.0 - wh_iou(*s, *c)).fold(f64::INFINITY, f64::min).powi(2))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..shapes.len())
        } else {
            let mut t = rng.gen_range(0.0..total);
            d.iter()
                .position(|&v| {
                    t -= v;
                    t < 0.0
                })
                .unwrap_or(shapes.len() - 1)
        };
        centers.push(shapes[pick]);
    }
    let mut assign = vec![usize::MAX; shapes.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (i, s) in shapes.iter().enumerate() {
            let best = (0..k)
                .max_by(|&a, &b| wh_iou(*s, centers[a]).total_cmp(&wh_iou(*s, centers[b])).then(b.cmp(&a)))
                .expect("k > 0");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = shapes.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(s, _)| s).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *center = [
                    members.iter().map(|m| m[0]).sum::<f64>() / n,
                    members.iter().map(|m| m[1]).sum::<f64>() / n,
                ];
            }
        }
    }
    centers.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])));
    Ok(centers
        .chunks(k_per_scale)
        .map(|g| g.iter().map(|c| [c[0] as f32, c[1] as f32]).collect())
        .collect())
}
