//! Raw outputs to final detections: decode, pre-NMS cap, class-wise NMS.

use pavescan_tensor::{Real, Tensor};

use crate::detector::{decode_candidates, Candidate, Detector};
use crate::error::Result;
use crate::evaluation::{confidence_order, nms_indices, Detection};

/// Candidates kept per image before NMS.
pub const MAX_CANDIDATES: usize = 1000;
/// Detections kept per image after NMS.
pub const MAX_DETECTIONS: usize = 300;

/// Keeps the top candidates by confidence, applies NMS, and caps the
/// survivors. Output is sorted by confidence descending.
pub fn postprocess(mut cands: Vec<Candidate>, nms_iou: f64) -> Result<Vec<Candidate>> {
    let dets: Vec<Detection> = cands.iter().map(|c| c.detection).collect();
    let order = confidence_order(&dets);
    if order.len() > MAX_CANDIDATES {
        let keep: Vec<Candidate> = order[..MAX_CANDIDATES].iter().map(|&i| cands[i].clone()).collect();
        cands = keep;
    }
    let dets: Vec<Detection> = cands.iter().map(|c| c.detection).collect();
    let mut kept: Vec<Candidate> = nms_indices(&dets, nms_iou)?.into_iter().map(|i| cands[i].clone()).collect();
    kept.truncate(MAX_DETECTIONS);
    Ok(kept)
}

/// Detections for a batch `[N, 3, S, S]` in network-input pixels.
pub fn detect_batch<T: Real>(det: &Detector<T>, images: &Tensor<T>, conf: f64, nms_iou: f64) -> Result<Vec<Vec<Candidate>>> {
    let raw = det.predict(images)?;
    decode_candidates(&raw, det.config(), conf)?
        .into_iter()
        .map(|c| postprocess(c, nms_iou))
        .collect()
}
