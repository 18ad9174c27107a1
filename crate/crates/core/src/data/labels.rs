use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::evaluation::BoundingBox;

/// Tolerance for boxes touching the image border after float rounding.
const EDGE_EPS: f64 = 1e-6;

/// One annotated object: class and normalized centre-form box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed label line: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: {field} out of range: {detail}")]
    OutOfRange {
        path: PathBuf,
        line: usize,
        field: &'static str,
        detail: String,
    },
}

impl LabelRecord {
    /// Checks coordinate ranges and that the box stays inside the image.
    /// Returns the offending field name on failure.
    pub fn check(&self, num_classes: usize) -> std::result::Result<(), (&'static str, String)> {
        if self.class_id >= num_classes {
            return Err(("class_id", format!("{} not below {num_classes}", self.class_id)));
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !(0.0..=1.0).contains(&v) {
                return Err((name, format!("{v} outside [0, 1]")));
            }
        }
        if self.w <= 0.0 {
            return Err(("w", "must be positive".into()));
        }
        if self.h <= 0.0 {
            return Err(("h", "must be positive".into()));
        }
        if self.cx - self.w / 2.0 < -EDGE_EPS || self.cx + self.w / 2.0 > 1.0 + EDGE_EPS {
            return Err(("w", "box extends past the image horizontally".into()));
        }
        if self.cy - self.h / 2.0 < -EDGE_EPS || self.cy + self.h / 2.0 > 1.0 + EDGE_EPS {
            return Err(("h", "box extends past the image vertically".into()));
        }
        Ok(())
    }

    /// Pixel corner box for an image of `width` x `height`.
    pub fn to_box(&self, width: f64, height: f64) -> crate::Result<BoundingBox> {
        BoundingBox::from_center(self.cx * width, self.cy * height, self.w * width, self.h * height)
    }

    pub fn from_box(class_id: usize, b: &BoundingBox, width: f64, height: f64) -> Self {
        let (cx, cy) = b.center();
        Self {
            class_id,
            cx: cx / width,
            cy: cy / height,
            w: b.width() / width,
            h: b.height() / height,
        }
    }
}

/// Parses `class_id cx cy w h` lines; blank lines are skipped.
pub fn parse_labels(text: &str, num_classes: usize, path: &Path) -> Result<Vec<LabelRecord>, LabelError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |reason: String| LabelError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if fields.len() != 5 {
            return Err(malformed(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| malformed(format!("class_id {:?} is not a non-negative integer", fields[0])))?;
        let mut nums = [0.0f64; 4];
        for (k, name) in ["cx", "cy", "w", "h"].iter().enumerate() {
            nums[k] = fields[k + 1]
                .parse()
                .map_err(|_| malformed(format!("{name} {:?} is not a number", fields[k + 1])))?;
        }
        let rec = LabelRecord {
            class_id,
            cx: nums[0],
            cy: nums[1],
            w: nums[2],
            h: nums[3],
        };
        rec.check(num_classes).map_err(|(field, detail)| LabelError::OutOfRange {
            path: path.to_path_buf(),
            line,
            field,
            detail,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_labels(path: &Path, num_classes: usize) -> Result<Vec<LabelRecord>, LabelError> {
    let text = std::fs::read_to_string(path).map_err(|source| LabelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_labels(&text, num_classes, path)
}

pub fn format_labels(records: &[LabelRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", r.class_id, r.cx, r.cy, r.w, r.h);
    }
    s
}
