use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::labels::{load_labels, LabelRecord};
use crate::error::{io_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MAGIC: &str = "pavescan-dataset 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Unassigned => "none",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "none" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

/// One image and its label file, both relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub label: String,
}

/// Listing of a dataset directory (`images/`, `labels/`, `manifest.txt`).
///
/// Manifest text format:
///
/// ```text
/// pavescan-dataset 1
/// classes pothole longitudinal_crack alligator_crack raveling
/// train images/00000.png 160 160 labels/00000.txt
/// val images/00001.png 160 160 labels/00001.txt
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nclasses {}\n", self.classes.join(" "));
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {} {} {}", e.split.as_str(), e.image, e.width, e.height, e.label);
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Invalid(format!("manifest line {line}: {why}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(bad(1, "missing 'pavescan-dataset 1' header")),
        }
        let classes = match lines.next() {
            Some((_, l)) if l.starts_with("classes ") => l.split_whitespace().skip(1).map(String::from).collect(),
            Some((i, _)) => return Err(bad(i + 1, "expected 'classes ...'")),
            None => return Err(bad(2, "missing class list")),
        };
        let mut entries = Vec::new();
        for (i, l) in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected '<split> <image> <width> <height> <label>'"));
            }
            let split = Split::parse(f[0]).ok_or_else(|| bad(i + 1, "split must be train, val or none"))?;
            let dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| bad(i + 1, "bad image size"));
            entries.push(ManifestEntry {
                split,
                image: f[1].to_string(),
                width: dim(f[2])?,
                height: dim(f[3])?,
                label: f[4].to_string(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            entries,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text, root)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).map_err(io_err(&path))
    }

    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.image)
    }

    pub fn label_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.label)
    }

    pub fn labels(&self, e: &ManifestEntry) -> Result<Vec<LabelRecord>> {
        Ok(load_labels(&self.label_path(e), self.classes.len())?)
    }

    /// Entries of one split, keeping the class list and root.
    pub fn subset(&self, split: Split) -> Self {
        Self {
            root: self.root.clone(),
            classes: self.classes.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    /// Object count per class over all label files.
    pub fn class_histogram(&self) -> Result<Vec<usize>> {
        let mut h = vec![0; self.classes.len()];
        for e in &self.entries {
            for r in self.labels(e)? {
                h[r.class_id] += 1;
            }
        }
        Ok(h)
    }
}

/// Seeded shuffle, then the first `round(n·ratio)` entries go to train.
/// Each part keeps the original entry order.
pub fn split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n = manifest.entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * ratio).round() as usize;
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let part = |want: bool, split: Split| DatasetManifest {
        root: manifest.root.clone(),
        classes: manifest.classes.clone(),
        entries: manifest
            .entries
            .iter()
            .zip(&is_train)
            .filter(|(_, &t)| t == want)
            .map(|(e, _)| ManifestEntry { split, ..e.clone() })
            .collect(),
    };
    Ok((part(true, Split::Train), part(false, Split::Val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("/tmp/x"),
            classes: super::super::class_names(),
            entries: (0..n)
                .map(|i| ManifestEntry {
                    split: Split::Unassigned,
                    image: format!("images/{i:05}.png"),
                    width: 160,
                    height: 160,
                    label: format!("labels/{i:05}.txt"),
                })
                .collect(),
        }
    }

    #[test]
    fn split_sizes() {
        let (t, v) = split(&manifest(100), 0.8, 1).unwrap();
        assert_eq!((t.entries.len(), v.entries.len()), (80, 20));
        let (t, v) = split(&manifest(5), 0.8, 1).unwrap();
        assert_eq!((t.entries.len(), v.entries.len()), (4, 1));
        assert!(split(&manifest(5), 1.0, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let m = manifest(37);
        let a = split(&m, 0.8, 9).unwrap();
        assert_eq!(a, split(&m, 0.8, 9).unwrap());
        let mut all: Vec<String> = a.0.entries.iter().chain(&a.1.entries).map(|e| e.image.clone()).collect();
        all.sort();
        let mut want: Vec<String> = m.entries.iter().map(|e| e.image.clone()).collect();
        want.sort();
        assert_eq!(all, want);
    }

    #[test]
    fn text_round_trip() {
        let (t, _) = split(&manifest(4), 0.5, 0).unwrap();
        let parsed = DatasetManifest::parse(&t.to_text(), &t.root).unwrap();
        assert_eq!(parsed, t);
        assert!(DatasetManifest::parse("nope", Path::new(".")).is_err());
    }
}
