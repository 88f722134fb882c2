//! The two stochastic view pipelines applied to target images.
//!
//! Pipeline A changes appearance (horizontal flip, colour jitter in random
//! order); pipeline B changes geometry (rotation, random resized crop).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{hsv_to_rgb, luminance, rgb_to_hsv, ImageSample, RgbImage};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue shift as a fraction of a full turn.
    pub hue: f64,
    pub rotation_degrees: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    /// Output side of pipeline B; 0 keeps the input size.
    pub out_size: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            rotation_degrees: 20.0,
            crop_scale_min: 0.8,
            crop_scale_max: 1.0,
            crop_ratio_min: 3.0 / 4.0,
            crop_ratio_max: 4.0 / 3.0,
            out_size: 0,
        }
    }
}

impl AugmentSpec {
    /// Every magnitude zero, no flips, full-frame crops.
    pub fn identity() -> Self {
        AugmentSpec {
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            rotation_degrees: 0.0,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(0.0..=1.0).contains(&self.flip_p) {
            return bad("flip_p must lie in [0, 1]");
        }
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return bad("need 0 < crop_scale_min <= crop_scale_max <= 1");
        }
        if !(self.crop_ratio_min > 0.0 && self.crop_ratio_min <= self.crop_ratio_max) {
            return bad("need 0 < crop_ratio_min <= crop_ratio_max");
        }
        let mags = [
            self.brightness,
            self.contrast,
            self.saturation,
            self.hue,
            self.rotation_degrees,
        ];
        if mags.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return bad("jitter and rotation magnitudes must be finite and >= 0");
        }
        if self.hue > 0.5 {
            return bad("hue must be <= 0.5");
        }
        Ok(())
    }
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set(img.width - 1 - x, y, img.get(x, y));
        }
    }
    out
}

pub fn adjust_brightness(img: &mut RgbImage, factor: f32) {
    img.map_pixels(|p| p.map(|v| (v * factor).clamp(0.0, 1.0)));
}

/// Blends with the mean luminance of the whole image.
pub fn adjust_contrast(img: &mut RgbImage, factor: f32) {
    let n = (img.width * img.height) as f64;
    let mean = (img
        .data
        .chunks(3)
        .map(|p| luminance([p[0], p[1], p[2]]) as f64)
        .sum::<f64>()
        / n) as f32;
    img.map_pixels(|p| p.map(|v| (factor * v + (1.0 - factor) * mean).clamp(0.0, 1.0)));
}

/// Blends each pixel with its own luminance.
pub fn adjust_saturation(img: &mut RgbImage, factor: f32) {
    img.map_pixels(|p| {
        let l = luminance(p);
        p.map(|v| (factor * v + (1.0 - factor) * l).clamp(0.0, 1.0))
    });
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &mut RgbImage, shift: f32) {
    img.map_pixels(|p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([(h + shift).rem_euclid(1.0), s, v]).map(|c| c.clamp(0.0, 1.0))
    });
}

/// Rotates by `degrees` about the image centre with bilinear resampling;
/// uncovered pixels become 0.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let theta = degrees.to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let cx = (img.width as f32 - 1.0) / 2.0;
    let cy = (img.height as f32 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        let dy = y as f32 - cy;
        for x in 0..img.width {
            let dx = x as f32 - cx;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out.set(x, y, img.sample_bilinear(sx, sy, 0.0));
        }
    }
    out
}

/// Crop window in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

/// Draws a crop covering `U[scale_min, scale_max]` of the area with a
/// log-uniform aspect ratio; after ten rejected draws falls back to a
/// centre crop.
pub fn sample_crop(width: usize, height: usize, spec: &AugmentSpec, rng: &mut Stream) -> CropRect {
    let area = (width * height) as f64;
    let (log_lo, log_hi) = (spec.crop_ratio_min.ln(), spec.crop_ratio_max.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, spec.crop_scale_min, spec.crop_scale_max);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropRect {
                left,
                top,
                width: w,
                height: h,
            };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < spec.crop_ratio_min {
        (width, ((width as f64 / spec.crop_ratio_min).round() as usize).clamp(1, height))
    } else if in_ratio > spec.crop_ratio_max {
        (((height as f64 * spec.crop_ratio_max).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropRect {
        left: (width - w) / 2,
        top: (height - h) / 2,
        width: w,
        height: h,
    }
}

pub fn resized_crop(img: &RgbImage, rect: CropRect, out_size: usize) -> RgbImage {
    img.resize_window(
        rect.left as f32,
        rect.top as f32,
        rect.width as f32,
        rect.height as f32,
        out_size,
        out_size,
    )
}

/// `U[lo, hi]`, returning `lo` exactly when the range is empty.
fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if hi > lo {
        lo + (hi - lo) * u
    } else {
        lo
    }
}

/// Flip with probability `flip_p`, then brightness/contrast/saturation/hue
/// jitter applied in an order drawn from `rng`. Zero magnitudes are skipped.
pub fn pipeline_a(sample: &ImageSample, spec: &AugmentSpec, rng: &mut Stream) -> ImageSample {
    let flip = rng.random::<f64>() < spec.flip_p;
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut Stream, m: f64| uniform(rng, (1.0 - m).max(0.0), 1.0 + m) as f32;
    let brightness = factor(rng, spec.brightness);
    let contrast = factor(rng, spec.contrast);
    let saturation = factor(rng, spec.saturation);
    let hue = uniform(rng, -spec.hue, spec.hue) as f32;

    let mut img = if flip {
        hflip(&sample.image)
    } else {
        sample.image.clone()
    };
    for op in order {
        match op {
            0 if spec.brightness > 0.0 => adjust_brightness(&mut img, brightness),
            1 if spec.contrast > 0.0 => adjust_contrast(&mut img, contrast),
            2 if spec.saturation > 0.0 => adjust_saturation(&mut img, saturation),
            3 if spec.hue > 0.0 => adjust_hue(&mut img, hue),
            _ => {}
        }
    }
    img.clamp01();
    ImageSample {
        image: img,
        ..sample.clone()
    }
}

/// Rotation by `U[-rotation_degrees, rotation_degrees]`, then a random
/// resized crop back to `out_size`.
pub fn pipeline_b(sample: &ImageSample, spec: &AugmentSpec, rng: &mut Stream) -> ImageSample {
    let angle = uniform(rng, -spec.rotation_degrees, spec.rotation_degrees);
    let rotated = if angle == 0.0 {
        sample.image.clone()
    } else {
        rotate(&sample.image, angle)
    };
    let rect = sample_crop(rotated.width, rotated.height, spec, rng);
    let out = match spec.out_size {
        0 => rotated.width,
        s => s,
    };
    let mut img = resized_crop(&rotated, rect, out);
    img.clamp01();
    ImageSample {
        image: img,
        ..sample.clone()
    }
}

/// The `(a, b)` view pair for one sample, each from its own stream keyed by
/// `(seed, sample id, epoch)`.
pub fn make_views(
    sample: &ImageSample,
    spec: &AugmentSpec,
    seed: u64,
    epoch: u64,
) -> (ImageSample, ImageSample) {
    let id = rng::hash_str(&format!("{}/{}", sample.domain, sample.id));
    let mut ra = rng::stream(seed, &[id, epoch, rng::TAG_VIEW_A]);
    let mut rb = rng::stream(seed, &[id, epoch, rng::TAG_VIEW_B]);
    (pipeline_a(sample, spec, &mut ra), pipeline_b(sample, spec, &mut rb))
}
