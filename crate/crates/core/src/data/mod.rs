//! Dataset formats, the synthetic distress generator, splitting,
//! letterbox preprocessing and anchor fitting.

mod anchors;
mod labels;
mod manifest;
mod preprocess;
mod synthetic;

pub use anchors::{kmeans_anchors, wh_iou};
pub use labels::{format_labels, load_labels, parse_labels, LabelError, LabelRecord};
pub use manifest::{split, DatasetManifest, ManifestEntry, Split};
pub use preprocess::{decode_image, image_to_tensor, letterbox, preprocess, LetterboxTransform, PAD_VALUE};
pub use synthetic::{generate_synthetic, render_image, SyntheticConfig, SyntheticImage};

pub const CLASS_NAMES: [&str; 4] = ["pothole", "longitudinal_crack", "alligator_crack", "raveling"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}
