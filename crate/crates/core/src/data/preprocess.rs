use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use pavescan_tensor::Tensor;

use crate::error::{Error, Result};
use crate::evaluation::BoundingBox;

/// Gray used for letterbox padding.
pub const PAD_VALUE: u8 = 114;

/// Geometry of one letterbox resize: `network = original·scale + pad`,
/// with separate effective scales per axis after integer rounding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxTransform {
    pub orig_width: usize,
    pub orig_height: usize,
    pub size: usize,
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl LetterboxTransform {
    pub fn new(orig_width: usize, orig_height: usize, size: usize) -> Self {
        let scale = (size as f64 / orig_width as f64).min(size as f64 / orig_height as f64);
        let new_w = ((orig_width as f64 * scale).round() as usize).clamp(1, size);
        let new_h = ((orig_height as f64 * scale).round() as usize).clamp(1, size);
        Self {
            orig_width,
            orig_height,
            size,
            scale_x: new_w as f64 / orig_width as f64,
            scale_y: new_h as f64 / orig_height as f64,
            pad_x: ((size - new_w) / 2) as f64,
            pad_y: ((size - new_h) / 2) as f64,
        }
    }

    pub fn resized(&self) -> (usize, usize) {
        (
            (self.orig_width as f64 * self.scale_x).round() as usize,
            (self.orig_height as f64 * self.scale_y).round() as usize,
        )
    }

    pub fn is_identity(&self) -> bool {
        self.orig_width == self.size && self.orig_height == self.size
    }

    /// Original pixels to network pixels.
    pub fn forward_box(&self, b: &BoundingBox) -> Result<BoundingBox> {
        BoundingBox::new(
            b.x1 * self.scale_x + self.pad_x,
            b.y1 * self.scale_y + self.pad_y,
            b.x2 * self.scale_x + self.pad_x,
            b.y2 * self.scale_y + self.pad_y,
        )
    }

    /// Network pixels back to original pixels, clipped to the image.
    pub fn inverse_box(&self, b: &BoundingBox) -> Result<BoundingBox> {
        let (w, h) = (self.orig_width as f64, self.orig_height as f64);
        BoundingBox::new(
            ((b.x1 - self.pad_x) / self.scale_x).clamp(0.0, w),
            ((b.y1 - self.pad_y) / self.scale_y).clamp(0.0, h),
            ((b.x2 - self.pad_x) / self.scale_x).clamp(0.0, w),
            ((b.y2 - self.pad_y) / self.scale_y).clamp(0.0, h),
        )
    }
}

pub fn decode_image(bytes: &[u8], origin: &str) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image {
            path: origin.to_string(),
            reason: e.to_string(),
        })
}

/// Aspect-preserving resize into an `size` x `size` canvas padded with gray.
pub fn letterbox(img: &RgbImage, size: usize) -> (RgbImage, LetterboxTransform) {
    let t = LetterboxTransform::new(img.width() as usize, img.height() as usize, size);
    if t.is_identity() {
        return (img.clone(), t);
    }
    let (nw, nh) = t.resized();
    let resized = imageops::resize(img, nw as u32, nh as u32, FilterType::Triangle);
    let mut canvas = RgbImage::from_pixel(size as u32, size as u32, Rgb([PAD_VALUE; 3]));
    imageops::replace(&mut canvas, &resized, t.pad_x as i64, t.pad_y as i64);
    (canvas, t)
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let plane = w * h;
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Decode, letterbox and normalise encoded image bytes.
pub fn preprocess(bytes: &[u8], size: usize, origin: &str) -> Result<(Tensor<f32>, LetterboxTransform)> {
    let img = decode_image(bytes, origin)?;
    let (boxed, t) = letterbox(&img, size);
    Ok((image_to_tensor(&boxed), t))
}
