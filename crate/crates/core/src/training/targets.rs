use crate::data::LabelRecord;
use crate::detector::{AnchorSite, NetworkConfig};
use crate::error::{Error, Result};

/// Default anchor shape-ratio limit.
pub const ANCHOR_THRESHOLD: f64 = 4.0;

/// One (ground truth, anchor, cell) assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub site: AnchorSite,
    pub class_id: usize,
    /// Index of the ground truth within its image.
    pub gt_index: usize,
    /// Target `(x, y)` relative to the cell corner and `(w, h)`, in grid units.
    pub target: [f64; 4],
    /// Anchor `(w, h)` in grid units.
    pub anchor: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleTargets {
    pub positives: Vec<Positive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub batch: usize,
    pub scales: Vec<ScaleTargets>,
}

impl Targets {
    pub fn num_positives(&self) -> usize {
        self.scales.iter().map(|s| s.positives.len()).sum()
    }

    /// Objectness mask of one scale, laid out `[N, A, g, g]`.
    pub fn positive_mask(&self, config: &NetworkConfig, scale: usize) -> Vec<bool> {
        let g = config.grid(scale);
        let a = config.anchors_per_scale();
        let mut mask = vec![false; self.batch * a * g * g];
        for p in &self.scales[scale].positives {
            let s = p.site;
            mask[((s.image * a + s.anchor) * g + s.gy) * g + s.gx] = true;
        }
        mask
    }
}

/// `max(w/wa, wa/w, h/ha, ha/h)`.
pub fn shape_ratio(wh: [f64; 2], anchor: [f64; 2]) -> f64 {
    let rw = wh[0] / anchor[0];
    let rh = wh[1] / anchor[1];
    rw.max(1.0 / rw).max(rh).max(1.0 / rh)
}

/// Assigns each ground truth to every anchor passing the shape-ratio test,
/// at the cell holding its centre plus the two neighbouring cells nearest
/// to the centre (horizontally and vertically), where they exist.
pub fn assign_targets(gt: &[Vec<LabelRecord>], config: &NetworkConfig, anchor_threshold: f64) -> Result<Targets> {
    for (i, labels) in gt.iter().enumerate() {
        if let Some(j) = labels.iter().position(|r| !(r.w > 0.0 && r.h > 0.0)) {
            return Err(Error::Invalid(format!(
                "ground truth {j} of image {i} has non-positive width or height"
            )));
        }
    }
    let mut scales = Vec::with_capacity(config.num_scales);
    for scale in 0..config.num_scales {
        let g = config.grid(scale);
        let gf = g as f64;
        let stride = config.stride(scale) as f64;
        let mut positives = Vec::new();
        for (image, labels) in gt.iter().enumerate() {
            for (gt_index, r) in labels.iter().enumerate() {
                let (gx, gy) = (r.cx * gf, r.cy * gf);
                let wh = [r.w * gf, r.h * gf];
                let mut cells = vec![(0.0, 0.0)];
                if gx.fract() < 0.5 && gx > 1.0 {
                    cells.push((0.5, 0.0));
                }
                if gy.fract() < 0.5 && gy > 1.0 {
                    cells.push((0.0, 0.5));
                }
                let (ix, iy) = (gf - gx, gf - gy);
                if ix.fract() < 0.5 && ix > 1.0 {
                    cells.push((-0.5, 0.0));
                }
                if iy.fract() < 0.5 && iy > 1.0 {
                    cells.push((0.0, -0.5));
                }
                for (anchor, &[aw, ah]) in config.anchors[scale].iter().enumerate() {
                    let a = [aw as f64 / stride, ah as f64 / stride];
                    if shape_ratio(wh, a) >= anchor_threshold {
                        continue;
                    }
                    for &(ox, oy) in &cells {
                        let cx = ((gx - ox).floor().max(0.0) as usize).min(g - 1);
                        let cy = ((gy - oy).floor().max(0.0) as usize).min(g - 1);
                        positives.push(Positive {
                            site: AnchorSite {
                                image,
                                scale,
                                anchor,
                                gy: cy,
                                gx: cx,
                            },
                            class_id: r.class_id,
                            gt_index,
                            target: [gx - cx as f64, gy - cy as f64, wh[0], wh[1]],
                            anchor: a,
                        });
                    }
                }
            }
        }
        scales.push(ScaleTargets { positives });
    }
    Ok(Targets { batch: gt.len(), scales })
}
