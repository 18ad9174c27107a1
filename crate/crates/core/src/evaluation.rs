//! Box geometry and detection metrics: IoU, NMS, greedy matching,
//! precision/recall, AP, mAP and confidence sweeps.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

/// Axis-aligned box in pixel corner form with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::Invalid(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// Indices of `dets` by confidence descending; ties keep input order.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .partial_cmp(&dets[i].confidence)
            .unwrap_or(Ordering::Equal)
    });
    order
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{name} {v} outside [0, 1]")))
    }
}

/// Class-wise greedy non-maximum suppression. Survivors come back sorted by
/// confidence descending.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    Ok(nms_indices(dets, iou_threshold)?.into_iter().map(|i| dets[i]).collect())
}

/// Input indices of the detections [`nms`] keeps, in output order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Result<Vec<usize>> {
    check_unit("NMS IoU threshold", iou_threshold)?;
    let order = confidence_order(dets);
    let mut removed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !removed[j]
                && dets[j].class_id == dets[i].class_id
                && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold
            {
                removed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per input detection: the matched ground-truth index, if any.
    pub matched: Vec<Option<usize>>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        self.matched[det].is_some()
    }
}

/// Greedy one-to-one matching: in confidence order, each detection takes the
/// highest-IoU unmatched same-class ground truth with IoU ≥ `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= iou_threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched[i] = Some(g);
        }
    }
    let tp = matched.iter().filter(|m| m.is_some()).count();
    MatchResult {
        matched,
        true_positives: tp,
        false_positives: dets.len() - tp,
        false_negatives: gts.len() - tp,
    }
}

/// Precision is 1 when nothing was predicted; recall is 1 when nothing was
/// there to find.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApMode {
    /// Exact area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.01, ..., 1.
    Point101,
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_points(ranked_tp: &[bool], total_gts: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked_tp
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            (tp as f64 / total_gts.max(1) as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Average precision of confidence-ranked TP flags. `None` when there are no
/// ground truths, so the class is left out of the mean.
pub fn average_precision(ranked_tp: &[bool], total_gts: usize, mode: ApMode) -> Option<f64> {
    if total_gts == 0 {
        return None;
    }
    let points = pr_points(ranked_tp, total_gts);
    let mut envelope: Vec<f64> = points.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let ap = match mode {
        ApMode::AllPoint => {
            let mut prev_r = 0.0;
            let mut sum = 0.0;
            for (&(r, _), &p) in points.iter().zip(&envelope) {
                sum += (r - prev_r) * p;
                prev_r = r;
            }
            sum
        }
        ApMode::Point101 => {
            let mut sum = 0.0;
            for step in 0..=100 {
                let level = step as f64 / 100.0;
                let p = points
                    .iter()
                    .zip(&envelope)
                    .find(|((r, _), _)| *r >= level - 1e-12)
                    .map_or(0.0, |(_, &p)| p);
                sum += p;
            }
            sum / 101.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

/// Mean over included classes; errors when no class has ground truth.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::Invalid("mAP undefined: no class has ground truth".into()));
    }
    Ok(included.iter().sum::<f64>() / included.len() as f64)
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Precision and recall over all images and classes, keeping only
/// detections with confidence ≥ τ, for each τ of `grid`.
pub fn confidence_sweep(images: &[ImageEval], iou_threshold: f64, grid: &[f64]) -> Result<Vec<SweepPoint>> {
    for w in grid.windows(2) {
        if w[0] > w[1] {
            return Err(Error::Invalid("sweep thresholds must ascend".into()));
        }
    }
    let mut out = Vec::with_capacity(grid.len());
    for &tau in grid {
        check_unit("sweep threshold", tau)?;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for img in images {
            let kept: Vec<Detection> = img.detections.iter().filter(|d| d.confidence >= tau).copied().collect();
            let m = match_detections(&kept, &img.ground_truth, iou_threshold);
            tp += m.true_positives;
            fp += m.false_positives;
            fn_ += m.false_negatives;
        }
        let (precision, recall) = precision_recall(tp, fp, fn_);
        out.push(SweepPoint {
            threshold: tau,
            precision,
            recall,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        });
    }
    Ok(out)
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub ap: Option<f64>,
    /// `(recall, precision)` after each ranked detection.
    pub pr_points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    pub classes: Vec<ClassReport>,
    pub map: f64,
    /// Mean of mAP over IoU thresholds 0.50, 0.55, ..., 0.95.
    pub map_50_95: f64,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub ap_mode: ApMode,
    pub sweep_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            ap_mode: ApMode::AllPoint,
            sweep_points: 21,
        }
    }
}

struct ClassTally {
    ranked: Vec<(f64, bool)>,
    num_gt: usize,
}

fn tally(images: &[ImageEval], num_classes: usize, iou_threshold: f64) -> Vec<ClassTally> {
    let mut out: Vec<ClassTally> = (0..num_classes)
        .map(|_| ClassTally {
            ranked: Vec::new(),
            num_gt: 0,
        })
        .collect();
    for img in images {
        let m = match_detections(&img.detections, &img.ground_truth, iou_threshold);
        for gt in &img.ground_truth {
            if let Some(t) = out.get_mut(gt.class_id) {
                t.num_gt += 1;
            }
        }
        for (i, d) in img.detections.iter().enumerate() {
            if let Some(t) = out.get_mut(d.class_id) {
                t.ranked.push((d.confidence, m.is_tp(i)));
            }
        }
    }
    for t in &mut out {
        // Stable: equal confidences keep image order.
        t.ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    }
    out
}

fn map_at(images: &[ImageEval], num_classes: usize, iou_threshold: f64, mode: ApMode) -> Result<f64> {
    let aps: Vec<Option<f64>> = tally(images, num_classes, iou_threshold)
        .iter()
        .map(|t| {
            let flags: Vec<bool> = t.ranked.iter().map(|r| r.1).collect();
            average_precision(&flags, t.num_gt, mode)
        })
        .collect();
    mean_ap(&aps)
}

/// Dataset-level evaluation; detections are pooled per class across images.
pub fn evaluate(images: &[ImageEval], class_names: &[String], opts: &EvalOptions) -> Result<EvalReport> {
    check_unit("IoU threshold", opts.iou_threshold)?;
    let n = class_names.len();
    if let Some(bad) = images
        .iter()
        .flat_map(|i| i.detections.iter().map(|d| d.class_id).chain(i.ground_truth.iter().map(|g| g.class_id)))
        .find(|&c| c >= n)
    {
        return Err(Error::Invalid(format!("class id {bad} out of range for {n} classes")));
    }
    let classes: Vec<ClassReport> = tally(images, n, opts.iou_threshold)
        .into_iter()
        .enumerate()
        .map(|(c, t)| {
            let flags: Vec<bool> = t.ranked.iter().map(|r| r.1).collect();
            let tp = flags.iter().filter(|&&f| f).count();
            ClassReport {
                class_id: c,
                name: class_names[c].clone(),
                num_gt: t.num_gt,
                true_positives: tp,
                false_positives: flags.len() - tp,
                false_negatives: t.num_gt - tp,
                ap: average_precision(&flags, t.num_gt, opts.ap_mode),
                pr_points: pr_points(&flags, t.num_gt),
            }
        })
        .collect();
    let map = mean_ap(&classes.iter().map(|c| c.ap).collect::<Vec<_>>())?;
    let mut range = 0.0;
    for k in 0..10 {
        range += map_at(images, n, 0.5 + 0.05 * k as f64, opts.ap_mode)?;
    }
    Ok(EvalReport {
        iou_threshold: opts.iou_threshold,
        ap_mode: opts.ap_mode,
        classes,
        map,
        map_50_95: range / 10.0,
        sweep: confidence_sweep(images, opts.iou_threshold, &uniform_grid(opts.sweep_points))?,
    })
}

impl EvalReport {
    pub fn totals(&self) -> (usize, usize, usize) {
        self.classes.iter().fold((0, 0, 0), |(a, b, c), r| {
            (a + r.true_positives, b + r.false_positives, c + r.false_negatives)
        })
    }

    /// One line for logs and CI gates.
    pub fn summary(&self) -> String {
        let (tp, fp, fn_) = self.totals();
        let (p, r) = precision_recall(tp, fp, fn_);
        format!(
            "mAP@{:.2}={:.4} mAP@0.5:0.95={:.4} precision={p:.4} recall={r:.4} tp={tp} fp={fp} fn={fn_}",
            self.iou_threshold, self.map, self.map_50_95
        )
    }

    /// Per-class table followed by the confidence sweep.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# evaluation iou_threshold={} ap_mode={:?}", self.iou_threshold, self.ap_mode);
        let _ = writeln!(s, "{:<20} {:>6} {:>6} {:>6} {:>6} {:>8}", "class", "gt", "tp", "fp", "fn", "ap");
        for c in &self.classes {
            let ap = c.ap.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>6} {:>6} {:>6} {:>8}",
                c.name, c.num_gt, c.true_positives, c.false_positives, c.false_negatives, ap
            );
        }
        let _ = writeln!(s, "map {:.6}", self.map);
        let _ = writeln!(s, "map_50_95 {:.6}", self.map_50_95);
        let _ = writeln!(s, "\n# sweep threshold precision recall");
        for p in &self.sweep {
            let _ = writeln!(s, "{:.4} {:.6} {:.6}", p.threshold, p.precision, p.recall);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bbox: BoundingBox, class_id: usize, confidence: f64) -> Detection {
        Detection {
            bbox,
            class_id,
            confidence,
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0);
        assert!((iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-15);
        assert!(BoundingBox::new(1., 0., 1., 2.).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = det(b(0., 0., 10., 10.), 0, 0.9);
        let c = det(b(0., 0., 10., 9.), 0, 0.8);
        assert_eq!(nms(&[c, a], 0.45).unwrap(), vec![a]);
        let far = det(b(50., 50., 60., 60.), 0, 0.8);
        assert_eq!(nms(&[a, far], 0.0).unwrap(), vec![a, far]);
        let other_class = det(c.bbox, 1, 0.8);
        assert_eq!(nms(&[a, other_class], 0.45).unwrap().len(), 2);
    }

    #[test]
    fn match_examples() {
        let g = GroundTruth {
            bbox: b(0., 0., 10., 10.),
            class_id: 0,
        };
        let m = match_detections(&[], &[g, g, g], 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 0, 3));
        let m = match_detections(&[det(g.bbox, 0, 0.7)], &[g], 0.5);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 0, 0));
    }

    #[test]
    fn precision_recall_examples() {
        assert_eq!(precision_recall(3, 1, 0).0, 0.75);
        assert_eq!(precision_recall(3, 0, 2).1, 0.6);
        assert_eq!(precision_recall(0, 0, 4).0, 1.0);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], 2, ApMode::AllPoint), Some(1.0));
        assert_eq!(average_precision(&[false, false], 2, ApMode::AllPoint), Some(0.0));
        assert_eq!(average_precision(&[true], 0, ApMode::AllPoint), None);
        let ap = average_precision(&[true, false, true], 3, ApMode::AllPoint).unwrap();
        assert!((ap - 5.0 / 9.0).abs() < 1e-12);
        let ap101 = average_precision(&[true, true], 2, ApMode::Point101).unwrap();
        assert!((ap101 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_examples() {
        assert_eq!(mean_ap(&[Some(1.0), Some(0.5)]).unwrap(), 0.75);
        assert_eq!(mean_ap(&[Some(0.3)]).unwrap(), 0.3);
        assert_eq!(mean_ap(&[Some(0.8), None, Some(0.4)]).unwrap(), (0.8 + 0.4) / 2.0);
        assert!(mean_ap(&[None]).is_err());
    }

    #[test]
    fn sweep_edges() {
        let g = GroundTruth {
            bbox: b(0., 0., 10., 10.),
            class_id: 0,
        };
        let img = ImageEval {
            detections: vec![det(g.bbox, 0, 0.6)],
            ground_truth: vec![g],
        };
        let s = confidence_sweep(&[img], 0.5, &[0.0, 0.7]).unwrap();
        assert_eq!(s[0].recall, 1.0);
        assert_eq!((s[1].recall, s[1].precision), (0.0, 1.0));
        assert!(confidence_sweep(&[], 0.5, &[0.5, 0.2]).is_err());
    }
}
