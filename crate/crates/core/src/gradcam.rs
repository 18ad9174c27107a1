//! Gradient-weighted class activation maps for detector outputs.

use image::{Rgb, RgbImage};
use pavescan_tensor::{Real, Tape, Tensor, Var};

use crate::data::LetterboxTransform;
use crate::detector::{decode_candidates, AnchorSite, Detector, RawPrediction, BOX_OUTPUTS};
use crate::error::{Error, Result};
use crate::params::{Mode, Session};

/// Heat values in `[0, 1]`, row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub source_layer: String,
    pub target: String,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Rows of the map, for JSON grids.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.width).map(|r| r.to_vec()).collect()
    }

    /// Resamples a network-input map onto the original image frame.
    pub fn to_original(&self, t: &LetterboxTransform) -> Result<Heatmap> {
        if self.width != t.size || self.height != t.size {
            return Err(Error::Invalid(format!(
                "heatmap is {}x{}, letterbox expects {}",
                self.width, self.height, t.size
            )));
        }
        let (w, h) = (t.orig_width, t.orig_height);
        let mut values = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let sx = (x as f64 + 0.5) * t.scale_x + t.pad_x - 0.5;
                let sy = (y as f64 + 0.5) * t.scale_y + t.pad_y - 0.5;
                values.push(bilinear_at(&self.values, self.width, self.height, sx, sy));
            }
        }
        Ok(Heatmap {
            width: w,
            height: h,
            values,
            source_layer: self.source_layer.clone(),
            target: self.target.clone(),
        })
    }
}

fn bilinear_at(src: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with half-pixel centres.
pub fn upsample_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = (y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        for x in 0..out_w {
            let sx = (x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            out.push(bilinear_at(src, w, h, sx, sy));
        }
    }
    out
}

/// Min-max normalisation; an all-zero map stays zero and a constant
/// positive map becomes all ones.
pub fn normalize(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else if max > min {
        values.iter_mut().for_each(|v| *v = ((*v - min) / (max - min)).clamp(0.0, 1.0));
    } else {
        values.iter_mut().for_each(|v| *v = 1.0);
    }
}

/// Raw class activation map `relu(Σ_c mean(∂score/∂A_c)·A_c)` of one image
/// from an activation `[1, C, h, w]` and its gradient.
pub fn weighted_activation<T: Real>(activation: &Tensor<T>, grad: Option<&Tensor<T>>) -> Result<(Vec<f64>, usize, usize)> {
    let (n, c, h, w) = activation.dims4("gradcam")?;
    if n != 1 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("Grad-CAM needs a [1, C, h, w] activation, got {:?}", activation.shape())));
    }
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    let Some(g) = grad else { return Ok((cam, w, h)) };
    let (a, gd) = (activation.data(), g.data());
    for ch in 0..c {
        let gs = &gd[ch * plane..(ch + 1) * plane];
        let alpha = gs.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (o, v) in cam.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
            *o += alpha * v.as_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok((cam, w, h))
}

/// Which scalar to attribute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CamTarget {
    /// `σ(objectness)·σ(class logit)` at one prediction site.
    Site { site: AnchorSite, class_id: usize },
    /// The highest-confidence candidate of a class.
    BestOfClass(usize),
    /// The highest-confidence candidate overall.
    Best,
}

/// Differentiable `σ(obj)·σ(cls)` at `site` from the raw head outputs.
pub fn site_score<T: Real>(det: &Detector<T>, tape: &Tape<T>, raw: &[Var], site: AnchorSite, class_id: usize) -> Result<Var> {
    let cfg = det.config();
    if site.scale >= raw.len() || class_id >= cfg.num_classes {
        return Err(Error::Invalid("Grad-CAM target outside the prediction grid".into()));
    }
    let idx = [site.index(cfg, 4), site.index(cfg, BOX_OUTPUTS + class_id)];
    let logits = tape.gather(raw[site.scale], &idx)?;
    let probs = tape.sigmoid(logits);
    let obj = tape.gather(probs, &[0])?;
    let cls = tape.gather(probs, &[1])?;
    let prod = tape.mul(obj, cls)?;
    Ok(tape.sum(prod))
}

/// Grad-CAM with a caller-built score. `score` receives the tape and the
/// raw per-scale outputs and returns a scalar variable.
pub fn gradcam_with_score<T, F>(det: &Detector<T>, image: &Tensor<T>, layer: Option<&str>, label: &str, score: F) -> Result<Heatmap>
where
    T: Real,
    F: FnOnce(&Tape<T>, &[Var]) -> Result<Var>,
{
    let size = det.config().input_size;
    let image = match image.rank() {
        3 => image.clone().reshape([1, 3, size, size])?,
        _ => image.clone(),
    };
    let layer = layer.map_or_else(|| det.default_cam_layer(), str::to_string);
    let tape = Tape::new();
    let mut s = Session::new(&tape, det.params(), Mode::Eval, false);
    s.retain_layer(&layer);
    let x = tape.leaf(image, true);
    let raw = det.forward(&mut s, x)?;
    let act = s.layer_output(&layer).ok_or_else(|| {
        let known: Vec<&str> = s.layer_names().collect();
        Error::Invalid(format!("unknown layer {layer:?}; known layers: {}", known.join(", ")))
    })?;
    let target = score(&tape, &raw)?;
    if tape.requires_grad(target) {
        tape.backward(target)?;
    }
    let grad = tape.grad(act);
    let (cam, w, h) = weighted_activation(&tape.value(act), grad.as_ref())?;
    let mut values = upsample_bilinear(&cam, w, h, size, size);
    normalize(&mut values);
    Ok(Heatmap {
        width: size,
        height: size,
        values,
        source_layer: layer,
        target: label.to_string(),
    })
}

/// Grad-CAM of `image` (`[3, S, S]` or `[1, 3, S, S]`) at `layer`
/// (default: last backbone block) for `target`.
pub fn compute_gradcam<T: Real>(det: &Detector<T>, image: &Tensor<T>, layer: Option<&str>, target: CamTarget) -> Result<Heatmap> {
    let label = match target {
        CamTarget::Site { site, class_id } => format!(
            "scale {} anchor {} cell ({}, {}) class {class_id}",
            site.scale, site.anchor, site.gx, site.gy
        ),
        CamTarget::BestOfClass(c) => format!("best class {c}"),
        CamTarget::Best => "best detection".to_string(),
    };
    gradcam_with_score(det, image, layer, &label, |tape, raw| {
        let (site, class_id) = match target {
            CamTarget::Site { site, class_id } => (site, class_id),
            _ => {
                let pred = RawPrediction {
                    scales: raw.iter().map(|v| tape.value(*v).clone()).collect(),
                };
                let wanted = match target {
                    CamTarget::BestOfClass(c) => Some(c),
                    _ => None,
                };
                let best = decode_candidates(&pred, det.config(), 0.0)?
                    .remove(0)
                    .into_iter()
                    .filter(|c| wanted.map_or(true, |w| c.detection.class_id == w))
                    .max_by(|a, b| a.detection.confidence.total_cmp(&b.detection.confidence))
                    .ok_or_else(|| Error::Invalid("no candidate for the Grad-CAM target".into()))?;
                (best.site, best.detection.class_id)
            }
        };
        site_score(det, tape, raw, site, class_id)
    })
}

/// Per-pixel blend `(1 − alpha)·image + alpha·colormap(heat)`.
pub fn overlay(heatmap: &Heatmap, image: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    if image.width() as usize != heatmap.width || image.height() as usize != heatmap.height {
        return Err(Error::Invalid(format!(
            "heatmap {}x{} does not match image {}x{}",
            heatmap.width,
            heatmap.height,
            image.width(),
            image.height()
        )));
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let heat = heatmap.get(x as usize, y as usize);
        let c = colormap(heat);
        let p = image.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|k| {
            ((1.0 - alpha) * p[k] as f64 + alpha * c[k] as f64).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

/// Colormap entry for a heat value in `[0, 1]`.
pub fn colormap(heat: f64) -> [u8; 3] {
    JET[(heat.clamp(0.0, 1.0) * 255.0).round() as usize]
}

/// Heatmap as a colormapped image.
pub fn render(heatmap: &Heatmap) -> RgbImage {
    RgbImage::from_fn(heatmap.width as u32, heatmap.height as u32, |x, y| {
        Rgb(colormap(heatmap.get(x as usize, y as usize)))
    })
}

/// 256-entry jet table: entry `i` at `x = i/255` holds
/// `round(255·clamp(1.5 − |4x − k|, 0, 1))` for `k = 3, 2, 1` (R, G, B).
pub const JET: [[u8; 3]; 256] = [
    [0, 0, 128], [0, 0, 132], [0, 0, 136], [0, 0, 140], [0, 0, 144], [0, 0, 147],
    [0, 0, 152], [0, 0, 156], [0, 0, 160], [0, 0, 163], [0, 0, 168], [0, 0, 172],
    [0, 0, 176], [0, 0, 179], [0, 0, 184], [0, 0, 188], [0, 0, 192], [0, 0, 195],
    [0, 0, 200], [0, 0, 204], [0, 0, 208], [0, 0, 211], [0, 0, 216], [0, 0, 220],
    [0, 0, 224], [0, 0, 227], [0, 0, 232], [0, 0, 236], [0, 0, 240], [0, 0, 243],
    [0, 0, 248], [0, 0, 252], [0, 0, 255], [0, 4, 255], [0, 8, 255], [0, 13, 255],
    [0, 16, 255], [0, 21, 255], [0, 25, 255], [0, 29, 255], [0, 32, 255], [0, 36, 255],
    [0, 40, 255], [0, 45, 255], [0, 48, 255], [0, 53, 255], [0, 57, 255], [0, 61, 255],
    [0, 64, 255], [0, 68, 255], [0, 72, 255], [0, 77, 255], [0, 80, 255], [0, 85, 255],
    [0, 89, 255], [0, 93, 255], [0, 96, 255], [0, 100, 255], [0, 104, 255], [0, 109, 255],
    [0, 112, 255], [0, 117, 255], [0, 121, 255], [0, 125, 255], [0, 128, 255], [0, 132, 255],
    [0, 137, 255], [0, 140, 255], [0, 144, 255], [0, 148, 255], [0, 153, 255], [0, 156, 255],
    [0, 160, 255], [0, 164, 255], [0, 169, 255], [0, 172, 255], [0, 176, 255], [0, 180, 255],
    [0, 185, 255], [0, 188, 255], [0, 192, 255], [0, 196, 255], [0, 201, 255], [0, 204, 255],
    [0, 208, 255], [0, 212, 255], [0, 217, 255], [0, 220, 255], [0, 224, 255], [0, 228, 255],
    [0, 233, 255], [0, 236, 255], [0, 240, 255], [0, 244, 255], [0, 249, 255], [0, 252, 255],
    [1, 255, 254], [5, 255, 250], [10, 255, 245], [14, 255, 242], [17, 255, 238], [21, 255, 234],
    [26, 255, 229], [30, 255, 226], [33, 255, 222], [37, 255, 218], [42, 255, 213], [46, 255, 210],
    [49, 255, 206], [53, 255, 202], [58, 255, 197], [62, 255, 194], [66, 255, 190], [69, 255, 186],
    [74, 255, 181], [78, 255, 178], [82, 255, 174], [85, 255, 170], [90, 255, 165], [94, 255, 162],
    [98, 255, 158], [101, 255, 154], [106, 255, 149], [110, 255, 146], [114, 255, 142], [117, 255, 138],
    [122, 255, 133], [126, 255, 130], [130, 255, 126], [133, 255, 122], [137, 255, 118], [141, 255, 114],
    [146, 255, 109], [150, 255, 105], [154, 255, 101], [158, 255, 98], [162, 255, 94], [165, 255, 90],
    [169, 255, 86], [173, 255, 82], [178, 255, 77], [182, 255, 73], [186, 255, 69], [190, 255, 66],
    [194, 255, 62], [197, 255, 58], [201, 255, 54], [205, 255, 50], [210, 255, 45], [214, 255, 41],
    [218, 255, 37], [222, 255, 33], [226, 255, 30], [229, 255, 26], [233, 255, 22], [237, 255, 18],
    [242, 255, 13], [246, 255, 9], [250, 255, 5], [254, 255, 1], [255, 252, 0], [255, 249, 0],
    [255, 245, 0], [255, 241, 0], [255, 236, 0], [255, 232, 0], [255, 228, 0], [255, 224, 0],
    [255, 220, 0], [255, 217, 0], [255, 213, 0], [255, 209, 0], [255, 204, 0], [255, 200, 0],
    [255, 196, 0], [255, 192, 0], [255, 188, 0], [255, 185, 0], [255, 181, 0], [255, 177, 0],
    [255, 172, 0], [255, 168, 0], [255, 164, 0], [255, 160, 0], [255, 156, 0], [255, 153, 0],
    [255, 149, 0], [255, 145, 0], [255, 140, 0], [255, 136, 0], [255, 132, 0], [255, 128, 0],
    [255, 125, 0], [255, 121, 0], [255, 117, 0], [255, 113, 0], [255, 108, 0], [255, 104, 0],
    [255, 100, 0], [255, 96, 0], [255, 93, 0], [255, 89, 0], [255, 85, 0], [255, 81, 0],
    [255, 76, 0], [255, 72, 0], [255, 68, 0], [255, 64, 0], [255, 61, 0], [255, 57, 0],
    [255, 53, 0], [255, 49, 0], [255, 44, 0], [255, 40, 0], [255, 36, 0], [255, 32, 0],
    [255, 29, 0], [255, 25, 0], [255, 21, 0], [255, 17, 0], [255, 12, 0], [255, 8, 0],
    [255, 4, 0], [255, 0, 0], [252, 0, 0], [248, 0, 0], [244, 0, 0], [240, 0, 0],
    [235, 0, 0], [231, 0, 0], [227, 0, 0], [224, 0, 0], [220, 0, 0], [216, 0, 0],
    [212, 0, 0], [208, 0, 0], [203, 0, 0], [199, 0, 0], [195, 0, 0], [192, 0, 0],
    [188, 0, 0], [184, 0, 0], [180, 0, 0], [176, 0, 0], [171, 0, 0], [167, 0, 0],
    [163, 0, 0], [160, 0, 0], [156, 0, 0], [152, 0, 0], [148, 0, 0], [144, 0, 0],
    [139, 0, 0], [135, 0, 0], [132, 0, 0], [128, 0, 0],
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_channel_sum_score() {
        // score = Σ A with a 2x2 single-channel activation: α = 1, map ∝ relu(A).
        let a = Tensor::new([1, 1, 2, 2], vec![1.0f64, -2.0, 3.0, 0.5]).unwrap();
        let g = Tensor::full([1, 1, 2, 2], 1.0);
        let (cam, w, h) = weighted_activation(&a, Some(&g)).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(cam, vec![1.0, 0.0, 3.0, 0.5]);
        let (zero, _, _) = weighted_activation(&a, None).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_edges() {
        let mut z = vec![0.0; 4];
        normalize(&mut z);
        assert_eq!(z, vec![0.0; 4]);
        let mut v = vec![0.0, 2.0, 1.0];
        normalize(&mut v);
        assert_eq!(v, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn overlay_alpha_ends() {
        let img = RgbImage::from_fn(4, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let heat = Heatmap {
            width: 4,
            height: 3,
            values: (0..12).map(|i| i as f64 / 11.0).collect(),
            source_layer: "l".into(),
            target: "t".into(),
        };
        assert_eq!(overlay(&heat, &img, 0.0).unwrap(), img);
        assert_eq!(overlay(&heat, &img, 1.0).unwrap(), render(&heat));
        let zero = Heatmap {
            values: vec![0.0; 12],
            ..heat.clone()
        };
        let half = overlay(&zero, &img, 0.5).unwrap();
        for (x, y, p) in half.enumerate_pixels() {
            let src = img.get_pixel(x, y).0;
            for k in 0..3 {
                let want = (0.5 * src[k] as f64 + 0.5 * JET[0][k] as f64).round() as u8;
                assert_eq!(p.0[k], want);
            }
        }
        assert!(overlay(&heat, &RgbImage::new(3, 3), 0.5).is_err());
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(JET[0], [0, 0, 128]);
        assert_eq!(JET[255], [128, 0, 0]);
        assert_eq!(colormap(0.5), JET[128]);
    }
}
