//! JSON bodies shared by the HTTP service and the command line.
//!
//! Every top-level body carries `schema_version`. Boxes are in original
//! image pixels, `x1 < x2`, `y1 < y2`, clipped to the image.

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionItem {
    pub class_id: usize,
    pub class_name: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub confidence: f64,
    pub nms_iou: f64,
}

/// Wall-clock milliseconds per stage. Not part of response equality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub preprocess_ms: f64,
    pub inference_ms: f64,
    pub postprocess_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub schema_version: u32,
    pub model_id: String,
    pub image: ImageSize,
    pub thresholds: Thresholds,
    /// Sorted by confidence, highest first.
    pub detections: Vec<DetectionItem>,
    pub timing: Timing,
}

impl DetectionResponse {
    /// Copy with zeroed timing, for content comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

/// Outcome for one frame of a sequence: exactly one of `response` and
/// `error` is present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<DetectionResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramesResponse {
    pub schema_version: u32,
    pub model_id: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major rows of values in `[0, 1]`, covering the whole original
    /// image.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcamResponse {
    pub schema_version: u32,
    pub model_id: String,
    pub image: ImageSize,
    pub layer: String,
    /// Index into the detections for the same thresholds, when one was
    /// explained.
    pub detection_index: Option<usize>,
    pub detection: Option<DetectionItem>,
    pub target: String,
    pub heatmap: HeatmapGrid,
    pub alpha: f64,
    /// Base64 PNG of the image blended with the colormapped heatmap.
    pub overlay_png: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub schema_version: u32,
    /// `ready` or `loading`.
    pub status: String,
    pub model_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassesResponse {
    pub schema_version: u32,
    pub classes: Vec<ClassEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub status: u16,
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub schema_version: u32,
    pub error: ErrorBody,
}

impl From<&crate::ServiceError> for ErrorResponse {
    fn from(e: &crate::ServiceError) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            error: ErrorBody {
                status: e.status(),
                kind: e.kind().to_string(),
                message: e.to_string(),
            },
        }
    }
}
