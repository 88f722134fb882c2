//! RGB float images and the resampling primitives shared by augmentation
//! and dataset loading.

use crate::error::{dim_err, Result};

/// Interleaved RGB, row-major, channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// An image with its (optional) class label, domain tag and stable id.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: RgbImage,
    pub label: Option<usize>,
    pub domain: String,
    pub id: String,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return dim_err(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            ));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
    }

    /// Bilinear sample at pixel-centre coordinates; taps outside the image read `fill`.
    pub fn sample_bilinear(&self, x: f32, y: f32, fill: f32) -> [f32; 3] {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let tap = |xi: i64, yi: i64| -> [f32; 3] {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                [fill; 3]
            } else {
                self.get(xi as usize, yi as usize)
            }
        };
        let (a, b, c, d) = (tap(x0, y0), tap(x0 + 1, y0), tap(x0, y0 + 1), tap(x0 + 1, y0 + 1));
        let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        std::array::from_fn(|k| w00 * a[k] + w10 * b[k] + w01 * c[k] + w11 * d[k])
    }

    /// Half-pixel-centred bilinear resize of the window `(left, top, width, height)`
    /// to `out_w x out_h`, replicating edge pixels.
    pub fn resize_window(
        &self,
        left: f32,
        top: f32,
        width: f32,
        height: f32,
        out_w: usize,
        out_h: usize,
    ) -> RgbImage {
        let sx = width / out_w as f32;
        let sy = height / out_h as f32;
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        let mut out = RgbImage::filled(out_w, out_h, [0.0; 3]);
        for oy in 0..out_h {
            let y = (top + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            for ox in 0..out_w {
                let x = (left + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                out.set(ox, oy, self.sample_clamped(x, y));
            }
        }
        out
    }

    /// Bilinear sample with neighbour indices clamped to the image.
    fn sample_clamped(&self, x: f32, y: f32) -> [f32; 3] {
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f32, y - y0 as f32);
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        std::array::from_fn(|k| {
            (1.0 - fx) * (1.0 - fy) * a[k] + fx * (1.0 - fy) * b[k] + (1.0 - fx) * fy * c[k] + fx * fy * d[k]
        })
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> RgbImage {
        self.resize_window(0.0, 0.0, self.width as f32, self.height as f32, out_w, out_h)
    }

    /// Converts to channel-planar `[3, H, W]` order.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks(3).enumerate() {
            for k in 0..3 {
                out[k * plane + i] = px[k];
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        RgbImage::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

/// Rec. 601 luma.
#[inline]
pub fn luminance(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
