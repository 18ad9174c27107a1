//! Image and frame-sequence inference producing the JSON response types.

use std::io::Cursor;
use std::time::Instant;

use base64::Engine as _;
use image::RgbImage;
use pavescan::data::{decode_image, image_to_tensor, letterbox, LetterboxTransform};
use pavescan::detector::{decode_candidates, Candidate};
use pavescan::evaluation::{DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use pavescan::gradcam::{compute_gradcam, overlay, upsample_bilinear, CamTarget};
use pavescan::pipeline::postprocess;
use pavescan::tensor::Tensor;

use crate::error::{Result, ServiceError};
use crate::model::Model;
use crate::response::*;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    pub conf: f64,
    pub nms_iou: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            conf: DEFAULT_CONF_THRESHOLD,
            nms_iou: DEFAULT_NMS_THRESHOLD,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("conf", self.conf), ("nms", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ServiceError::BadRequest(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// A decoded, letterboxed image ready for the network.
pub struct Prepared {
    pub original: RgbImage,
    pub tensor: Tensor<f32>,
    pub transform: LetterboxTransform,
}

pub fn prepare(model: &Model, bytes: &[u8], origin: &str) -> Result<Prepared> {
    let original = decode_image(bytes, origin)?;
    let (boxed, transform) = letterbox(&original, model.input_size());
    let size = model.input_size();
    let tensor = image_to_tensor(&boxed)
        .reshape([1, 3, size, size])
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(Prepared {
        original,
        tensor,
        transform,
    })
}

/// Final detections with their prediction sites, boxes mapped back to the
/// original image. Boxes that vanish when clipped to the image are dropped.
pub fn detect_prepared(model: &Model, p: &Prepared, params: &DetectParams) -> Result<Vec<(Candidate, DetectionItem)>> {
    Ok(detect_timed(model, p, params)?.0)
}

fn detect_timed(model: &Model, p: &Prepared, params: &DetectParams) -> Result<(Vec<(Candidate, DetectionItem)>, f64, f64)> {
    params.validate()?;
    let t = Instant::now();
    let raw = model.detector().predict(&p.tensor)?;
    let inference_ms = ms(t);
    let t = Instant::now();
    let cands = decode_candidates(&raw, model.detector().config(), params.conf)?
        .pop()
        .unwrap_or_default();
    let cands = postprocess(cands, params.nms_iou)?;
    let items = cands
        .into_iter()
        .filter_map(|c| {
            let b = p.transform.inverse_box(&c.detection.bbox).ok()?;
            let item = DetectionItem {
                class_id: c.detection.class_id,
                class_name: model.classes()[c.detection.class_id].clone(),
                confidence: c.detection.confidence,
                bbox: PixelBox {
                    x1: b.x1,
                    y1: b.y1,
                    x2: b.x2,
                    y2: b.y2,
                },
            };
            Some((c, item))
        })
        .collect();
    Ok((items, inference_ms, ms(t)))
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Decode, letterbox, forward, decode boxes, NMS, and map back to original
/// pixels.
pub fn detect_image(model: &Model, bytes: &[u8], params: &DetectParams) -> Result<DetectionResponse> {
    params.validate()?;
    let start = Instant::now();
    let p = prepare(model, bytes, "upload")?;
    let preprocess_ms = ms(start);
    let (raw, inference_ms, postprocess_ms) = detect_timed(model, &p, params)?;
    Ok(DetectionResponse {
        schema_version: SCHEMA_VERSION,
        model_id: model.model_id().to_string(),
        image: ImageSize {
            width: p.original.width() as usize,
            height: p.original.height() as usize,
        },
        thresholds: Thresholds {
            confidence: params.conf,
            nms_iou: params.nms_iou,
        },
        detections: raw.into_iter().map(|(_, d)| d).collect(),
        timing: Timing {
            preprocess_ms,
            inference_ms,
            postprocess_ms,
            total_ms: ms(start),
        },
    })
}

/// One encoded frame of a sequence.
#[derive(Clone, Debug)]
pub struct Frame {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Lazily runs [`detect_image`] on each frame in order. Frames are
/// independent; a frame that fails yields an error record and the sequence
/// continues.
pub fn detect_frames<'a, I>(model: &'a Model, frames: I, params: DetectParams) -> impl Iterator<Item = FrameRecord> + 'a
where
    I: IntoIterator<Item = Frame>,
    I::IntoIter: 'a,
{
    frames.into_iter().enumerate().map(move |(index, f)| match detect_image(model, &f.bytes, &params) {
        Ok(r) => FrameRecord {
            index,
            name: f.name,
            response: Some(r),
            error: None,
        },
        Err(e) => FrameRecord {
            index,
            name: f.name,
            response: None,
            error: Some(e.to_string()),
        },
    })
}

pub fn frames_response(model: &Model, frames: Vec<Frame>, params: DetectParams) -> Result<FramesResponse> {
    params.validate()?;
    Ok(FramesResponse {
        schema_version: SCHEMA_VERSION,
        model_id: model.model_id().to_string(),
        frames: detect_frames(model, frames, params).collect(),
    })
}

/// Regular files of a tar archive, in archive order.
pub fn frames_from_tar(bytes: &[u8]) -> Result<Vec<Frame>> {
    let bad = |e: std::io::Error| ServiceError::BadRequest(format!("malformed tar archive: {e}"));
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    let mut frames = Vec::new();
    for entry in archive.entries().map_err(bad)? {
        let mut entry = entry.map_err(bad)?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let name = entry.path().map_err(bad)?.display().to_string();
        let mut data = Vec::new();
        std::io::Read::read_to_end(&mut entry, &mut data).map_err(bad)?;
        frames.push(Frame { name, bytes: data });
    }
    Ok(frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcamParams {
    pub detect: DetectParams,
    /// Detection to explain; `None` explains the top detection, or the
    /// best-scoring prediction when nothing passes the threshold.
    pub detection: Option<usize>,
    pub layer: Option<String>,
    pub alpha: f64,
}

impl Default for GradcamParams {
    fn default() -> Self {
        Self {
            detect: DetectParams::default(),
            detection: None,
            layer: None,
            alpha: 0.5,
        }
    }
}

pub struct GradcamOutput {
    pub response: GradcamResponse,
    pub overlay: RgbImage,
    pub heatmap: pavescan::gradcam::Heatmap,
}

/// Grad-CAM for one detection of an image. The heatmap is returned in
/// original image coordinates; the JSON grid is resampled so its longer
/// side equals the network input size.
pub fn gradcam_image(model: &Model, bytes: &[u8], params: &GradcamParams) -> Result<GradcamOutput> {
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(ServiceError::BadRequest(format!("alpha must lie in [0, 1], got {}", params.alpha)));
    }
    let p = prepare(model, bytes, "upload")?;
    let dets = detect_prepared(model, &p, &params.detect)?;
    let (target, index, item) = match params.detection {
        Some(i) => {
            let (c, d) = dets.get(i).ok_or_else(|| {
                ServiceError::BadRequest(format!("detection index {i} out of range ({} detections)", dets.len()))
            })?;
            (CamTarget::Site { site: c.site, class_id: c.detection.class_id }, Some(i), Some(d.clone()))
        }
        None => match dets.first() {
            Some((c, d)) => (CamTarget::Site { site: c.site, class_id: c.detection.class_id }, Some(0), Some(d.clone())),
            None => (CamTarget::Best, None, None),
        },
    };
    let image = p
        .tensor
        .clone()
        .reshape([3, model.input_size(), model.input_size()])
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let heat = compute_gradcam(model.detector(), &image, params.layer.as_deref(), target)?;
    let heat = heat.to_original(&p.transform)?;
    let over = overlay(&heat, &p.original, params.alpha)?;

    let (w, h) = (heat.width, heat.height);
    let scale = (model.input_size() as f64 / w.max(h) as f64).min(1.0);
    let gw = ((w as f64 * scale).round() as usize).max(1);
    let gh = ((h as f64 * scale).round() as usize).max(1);
    let grid = if (gw, gh) == (w, h) {
        heat.values.clone()
    } else {
        upsample_bilinear(&heat.values, w, h, gw, gh)
    };
    let mut png = Vec::new();
    over.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ServiceError::Internal(format!("PNG encoding failed: {e}")))?;
    let response = GradcamResponse {
        schema_version: SCHEMA_VERSION,
        model_id: model.model_id().to_string(),
        image: ImageSize { width: w, height: h },
        layer: heat.source_layer.clone(),
        detection_index: index,
        detection: item,
        target: heat.target.clone(),
        heatmap: HeatmapGrid {
            width: gw,
            height: gh,
            values: grid.chunks(gw).map(|r| r.iter().map(|v| v.clamp(0.0, 1.0)).collect()).collect(),
        },
        alpha: params.alpha,
        overlay_png: base64::engine::general_purpose::STANDARD.encode(&png),
    };
    Ok(GradcamOutput {
        response,
        overlay: over,
        heatmap: heat,
    })
}
