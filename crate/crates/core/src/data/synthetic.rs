//! Procedural pavement images: noisy asphalt with dark elliptic potholes,
//! thin vertical cracks, polyline mesh patches and speckled raveling.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::labels::{format_labels, LabelRecord};
use super::manifest::{split, DatasetManifest, ManifestEntry, Split};
use crate::error::{io_err, Error, Result};
use crate::evaluation::BoundingBox;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub image_size: usize,
    /// Class sampling weights; must sum to 1.
    pub class_weights: Vec<f64>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub train_ratio: f64,
    pub seed: u64,
    pub background_level: f64,
    pub background_noise: f64,
    /// Pothole ellipse radius range in pixels.
    pub pothole_radius: (f64, f64),
    /// Longitudinal crack length range.
    pub crack_length: (f64, f64),
    /// Alligator mesh patch side range.
    pub mesh_size: (f64, f64),
    /// Raveling patch side range.
    pub speckle_size: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_images: 500,
            image_size: 160,
            class_weights: vec![0.25; super::NUM_CLASSES],
            min_objects: 1,
            max_objects: 3,
            train_ratio: 0.8,
            seed: 7,
            background_level: 0.45,
            background_noise: 0.06,
            pothole_radius: (8.0, 20.0),
            crack_length: (40.0, 100.0),
            mesh_size: (28.0, 56.0),
            speckle_size: (24.0, 52.0),
        }
    }
}

impl SyntheticConfig {
    /// Defaults with the object size ranges scaled to `image_size`.
    pub fn for_size(image_size: usize) -> Self {
        let d = Self::default();
        let k = image_size as f64 / d.image_size as f64;
        let scale = |(lo, hi): (f64, f64)| (lo * k, hi * k);
        Self {
            image_size,
            pothole_radius: scale(d.pothole_radius),
            crack_length: scale(d.crack_length),
            mesh_size: scale(d.mesh_size),
            speckle_size: scale(d.speckle_size),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.class_weights.len() != super::NUM_CLASSES {
            return fail("one weight per class required");
        }
        if self.class_weights.iter().any(|&w| !(w >= 0.0)) || (self.class_weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("class weights must be non-negative and sum to 1");
        }
        if self.image_size < 64 {
            return fail("image_size must be at least 64");
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return fail("train_ratio must lie in (0, 1)");
        }
        let s = self.image_size as f64;
        for (name, (lo, hi), cap) in [
            ("pothole_radius", self.pothole_radius, s / 4.0),
            ("crack_length", self.crack_length, s - 8.0),
            ("mesh_size", self.mesh_size, s / 2.0),
            ("speckle_size", self.speckle_size, s / 2.0),
        ] {
            if !(lo >= 2.0 && lo <= hi && hi <= cap) {
                return Err(Error::Config(format!("synthetic data: {name} range ({lo}, {hi}) invalid for size {s}")));
            }
        }
        Ok(())
    }
}

pub struct SyntheticImage {
    pub image: RgbImage,
    pub labels: Vec<LabelRecord>,
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
    extent: Option<(usize, usize, usize, usize)>,
}

impl Canvas {
    fn paint(&mut self, x: f64, y: f64, rgb: [f64; 3], alpha: f64) {
        if x < 0.0 || y < 0.0 {
            return;
        }
        let (xi, yi) = (x as usize, y as usize);
        if xi >= self.size || yi >= self.size {
            return;
        }
        let p = &mut self.px[yi * self.size + xi];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + rgb[c] * alpha;
        }
        self.extent = Some(match self.extent {
            None => (xi, yi, xi, yi),
            Some((a, b, c, d)) => (a.min(xi), b.min(yi), c.max(xi), d.max(yi)),
        });
    }

    fn disc(&mut self, x: f64, y: f64, r: f64, rgb: [f64; 3]) {
        let ri = r.ceil() as i64;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if (dx * dx + dy * dy) as f64 <= r * r + 1e-9 {
                    self.paint(x + dx as f64, y + dy as f64, rgb, 1.0);
                }
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), r: f64, rgb: [f64; 3]) {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let steps = (len * 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.disc(a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, r, rgb);
        }
    }

    fn take_extent(&mut self) -> Option<(usize, usize, usize, usize)> {
        self.extent.take()
    }
}

fn gray(v: f64) -> [f64; 3] {
    [v, v, v]
}

/// Footprint `(x0, y0, w, h)` an object of `class` may draw into.
fn propose(class: usize, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (lo, hi) = match class {
        0 => cfg.pothole_radius,
        1 => cfg.crack_length,
        2 => cfg.mesh_size,
        _ => cfg.speckle_size,
    };
    match class {
        0 => {
            let rx = rng.gen_range(lo..=hi);
            let ry = (rx * rng.gen_range(0.65..1.0)).max(lo);
            (2.0 * rx + 2.0, 2.0 * ry + 2.0)
        }
        1 => (16.0, rng.gen_range(lo..=hi)),
        _ => (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)),
    }
}

fn draw(class: usize, canvas: &mut Canvas, x0: f64, y0: f64, w: f64, h: f64, rng: &mut ChaCha8Rng) {
    match class {
        0 => {
            let (rx, ry) = (w / 2.0 - 1.0, h / 2.0 - 1.0);
            let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
            for y in y0 as usize..(y0 + h).ceil() as usize {
                for x in x0 as usize..(x0 + w).ceil() as usize {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let d = dx * dx + dy * dy;
                    if d <= 1.0 {
                        let v = 0.08 + 0.1 * d + rng.gen_range(-0.02..0.02);
                        canvas.paint(x as f64, y as f64, [v * 1.15, v, v * 0.85], 1.0);
                    }
                }
            }
        }
        1 => {
            let mut x = x0 + w / 2.0;
            let mut y = y0 + 1.0;
            let radius = if rng.gen_bool(0.5) { 0.6 } else { 1.0 };
            let v = rng.gen_range(0.04..0.12);
            while y + 4.0 < y0 + h - 1.0 {
                let nx = (x + rng.gen_range(-1.5..1.5)).clamp(x0 + 3.0, x0 + w - 3.0);
                canvas.line((x, y), (nx, y + 4.0), radius, gray(v));
                x = nx;
                y += 4.0;
            }
        }
        2 => {
            let v = rng.gen_range(0.05..0.14);
            let cell = rng.gen_range(7.0..10.0);
            let nx = ((w - 2.0) / cell).floor().max(2.0) as usize;
            let ny = ((h - 2.0) / cell).floor().max(2.0) as usize;
            let (sx, sy) = ((w - 3.0) / nx as f64, (h - 3.0) / ny as f64);
            let jitter = cell * 0.2;
            let mut pts = vec![(0.0, 0.0); (nx + 1) * (ny + 1)];
            for j in 0..=ny {
                for i in 0..=nx {
                    let jx = if i == 0 || i == nx { 0.0 } else { rng.gen_range(-jitter..jitter) };
                    let jy = if j == 0 || j == ny { 0.0 } else { rng.gen_range(-jitter..jitter) };
                    pts[j * (nx + 1) + i] = (x0 + 1.5 + i as f64 * sx + jx, y0 + 1.5 + j as f64 * sy + jy);
                }
            }
            for j in 0..=ny {
                for i in 0..=nx {
                    let p = pts[j * (nx + 1) + i];
                    if i < nx {
                        canvas.line(p, pts[j * (nx + 1) + i + 1], 0.6, gray(v));
                    }
                    if j < ny {
                        canvas.line(p, pts[(j + 1) * (nx + 1) + i], 0.6, gray(v));
                    }
                }
            }
        }
        _ => {
            for by in (y0 as usize..(y0 + h) as usize).step_by(2) {
                for bx in (x0 as usize..(x0 + w) as usize).step_by(2) {
                    if !rng.gen_bool(0.7) {
                        continue;
                    }
                    let v = if rng.gen_bool(0.5) {
                        rng.gen_range(0.72..0.92)
                    } else {
                        rng.gen_range(0.12..0.28)
                    };
                    let rgb = [v, v * 0.97, v * 0.9];
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let (x, y) = (bx + dx, by + dy);
                        if (x as f64) < x0 + w && (y as f64) < y0 + h {
                            canvas.paint(x as f64, y as f64, rgb, 1.0);
                        }
                    }
                }
            }
        }
    }
}

fn overlaps(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), margin: f64) -> bool {
    a.0 < b.0 + b.2 + margin && b.0 < a.0 + a.2 + margin && a.1 < b.1 + b.3 + margin && b.1 < a.1 + a.3 + margin
}

/// Renders image `index` of the dataset described by `cfg`. The result
/// depends only on `cfg` and `index`.
pub fn render_image(cfg: &SyntheticConfig, index: usize) -> Result<SyntheticImage> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.image_size;
    let s = size as f64;
    let base = cfg.background_level + rng.gen_range(-0.05..0.05);
    let mut canvas = Canvas {
        size,
        px: (0..size * size)
            .map(|_| gray(base + rng.gen_range(-cfg.background_noise..cfg.background_noise)))
            .collect(),
        extent: None,
    };
    let classes = WeightedIndex::new(&cfg.class_weights).map_err(|e| Error::Config(e.to_string()))?;
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..count {
        let class = classes.sample(&mut rng);
        let mut spot = None;
        for _ in 0..50 {
            let (w, h) = propose(class, cfg, &mut rng);
            let x0 = rng.gen_range(1.0..(s - w - 1.0)).floor();
            let y0 = rng.gen_range(1.0..(s - h - 1.0)).floor();
            let r = (x0, y0, w, h);
            if placed.iter().all(|&p| !overlaps(p, r, 3.0)) {
                spot = Some(r);
                break;
            }
        }
        let Some((x0, y0, w, h)) = spot else { continue };
        placed.push((x0, y0, w, h));
        canvas.take_extent();
        draw(class, &mut canvas, x0, y0, w, h, &mut rng);
        if let Some((a, b, c, d)) = canvas.take_extent() {
            let bbox = BoundingBox::new(a as f64, b as f64, (c + 1) as f64, (d + 1) as f64)?;
            labels.push(LabelRecord::from_box(class, &bbox, s, s));
        }
    }
    let image = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = canvas.px[y as usize * size + x as usize];
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    Ok(SyntheticImage { image, labels })
}

/// Writes `images/`, `labels/` and a split manifest under `out_dir`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut entries = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let img = render_image(cfg, i)?;
        let image = format!("images/{i:05}.png");
        let label = format!("labels/{i:05}.txt");
        let ipath = out_dir.join(&image);
        img.image.save(&ipath).map_err(|e| Error::Image {
            path: ipath.display().to_string(),
            reason: e.to_string(),
        })?;
        let lpath = out_dir.join(&label);
        std::fs::write(&lpath, format_labels(&img.labels)).map_err(io_err(&lpath))?;
        entries.push(ManifestEntry {
            split: Split::Unassigned,
            image,
            width: cfg.image_size,
            height: cfg.image_size,
            label,
        });
    }
    let all = DatasetManifest {
        root: out_dir.to_path_buf(),
        classes: super::class_names(),
        entries,
    };
    let (train, _) = split(&all, cfg.train_ratio, cfg.seed)?;
    let train_images: std::collections::HashSet<&str> = train.entries.iter().map(|e| e.image.as_str()).collect();
    let manifest = DatasetManifest {
        entries: all
            .entries
            .iter()
            .map(|e| ManifestEntry {
                split: if train_images.contains(e.image.as_str()) { Split::Train } else { Split::Val },
                ..e.clone()
            })
            .collect(),
        ..all.clone()
    };
    manifest.save()?;
    Ok(manifest)
}
