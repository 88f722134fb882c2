//! Datasets: the `<root>/<domain>/<class>/<image>.png` folder layout, a
//! procedural two-domain generator, and seeded mini-batch ordering.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{adjust_brightness, adjust_hue, rotate};
use crate::error::{Error, Result};
use crate::image::{hsv_to_rgb, ImageSample, RgbImage};
use crate::rng::{self, Stream};

pub const SOURCE_DOMAIN: &str = "source";
pub const TARGET_DOMAIN: &str = "target";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<ImageSample>,
    pub classes: Vec<String>,
    pub domain: String,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.label.is_some())
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> DatasetSplit {
        let mut out = self.clone();
        out.samples.iter_mut().for_each(|s| s.label = None);
        out
    }
}

/// Global appearance change applied to every target image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Hue rotation in turns.
    pub hue_shift: f64,
    pub brightness_scale: f64,
    pub rotation_deg: f64,
    pub noise_std: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            hue_shift: 0.0,
            brightness_scale: 1.0,
            rotation_deg: 0.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            per_class: 25,
            image_size: 32,
            domain_shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.image_size < 4 {
            return Err(Error::Config(
                "synthetic data needs num_classes >= 1, per_class >= 1, image_size >= 4".into(),
            ));
        }
        let s = &self.domain_shift;
        let vals = [s.hue_shift, s.brightness_scale, s.rotation_deg, s.noise_std];
        if vals.iter().any(|v| !v.is_finite()) || s.noise_std < 0.0 || s.brightness_scale < 0.0 {
            return Err(Error::Config(
                "domain_shift values must be finite; noise_std and brightness_scale >= 0".into(),
            ));
        }
        Ok(())
    }
}

const GLYPHS: [&str; 8] = ["disk", "square", "triangle", "plus", "ring", "cross", "bars", "diamond"];

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| format!("class_{c:02}_{}", GLYPHS[c % GLYPHS.len()]))
        .collect()
}

/// Inside-test for glyph `kind` in local coordinates scaled to the glyph radius.
fn glyph_contains(kind: usize, u: f32, v: f32) -> bool {
    match kind % GLYPHS.len() {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v <= 0.6 && u.abs() <= (v + 0.9) * 0.6,
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        5 => {
            let (a, b) = ((u + v) * std::f32::consts::FRAC_1_SQRT_2, (u - v) * std::f32::consts::FRAC_1_SQRT_2);
            (a.abs() <= 0.28 && b.abs() <= 1.0) || (b.abs() <= 0.28 && a.abs() <= 1.0)
        }
        6 => u.abs() <= 0.95 && ((v - 0.5).abs() <= 0.22 || (v + 0.5).abs() <= 0.22),
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn uniform(rng: &mut Stream, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// One procedural image of `class`: a coloured glyph over a dim background.
fn render_instance(class: usize, num_classes: usize, size: usize, rng: &mut Stream) -> RgbImage {
    let s = size as f32;
    let bg = uniform(rng, 0.08, 0.3);
    let bg_rgb = [bg + uniform(rng, -0.03, 0.03), bg, bg + uniform(rng, -0.03, 0.03)];
    let hue = class as f32 / num_classes as f32 + uniform(rng, -0.03, 0.03);
    let color = hsv_to_rgb([hue.rem_euclid(1.0), uniform(rng, 0.55, 0.9), uniform(rng, 0.7, 1.0)]);
    let cx = s * uniform(rng, 0.38, 0.62);
    let cy = s * uniform(rng, 0.38, 0.62);
    let radius = s * uniform(rng, 0.24, 0.34);
    let phi = uniform(rng, -15.0, 15.0).to_radians();
    let (sin, cos) = phi.sin_cos();
    let texture = Normal::new(0.0f32, 0.02).expect("valid std");

    let mut img = RgbImage::filled(size, size, bg_rgb);
    for y in 0..size {
        for x in 0..size {
            let mut cov = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = x as f32 + (sx as f32 + 0.5) / 3.0 - cx;
                    let py = y as f32 + (sy as f32 + 0.5) / 3.0 - cy;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    if glyph_contains(class, u, v) {
                        cov += 1.0 / 9.0;
                    }
                }
            }
            let px: [f32; 3] = std::array::from_fn(|k| {
                bg_rgb[k] * (1.0 - cov) + color[k] * cov + texture.sample(rng)
            });
            img.set(x, y, px);
        }
    }
    img.clamp01();
    img
}

fn apply_shift(img: &mut RgbImage, shift: &DomainShift, rng: &mut Stream) {
    if shift.hue_shift != 0.0 {
        adjust_hue(img, shift.hue_shift as f32);
    }
    if shift.brightness_scale != 1.0 {
        adjust_brightness(img, shift.brightness_scale as f32);
    }
    if shift.rotation_deg != 0.0 {
        *img = rotate(img, shift.rotation_deg);
    }
    if shift.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, shift.noise_std as f32).expect("valid std");
        img.data.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    img.clamp01();
}

/// Renders both domains in memory, quantised to 8 bits exactly as written to disk.
pub fn render_synthetic(spec: &SynthSpec) -> Result<(DatasetSplit, DatasetSplit)> {
    spec.validate()?;
    let classes = class_names(spec.num_classes);
    let render = |domain: &str, tag: u64, shift: Option<&DomainShift>| -> DatasetSplit {
        let jobs: Vec<(usize, usize)> = (0..spec.num_classes)
            .flat_map(|c| (0..spec.per_class).map(move |i| (c, i)))
            .collect();
        let samples = jobs
            .par_iter()
            .map(|&(c, i)| {
                let mut r = rng::stream(spec.seed, &[tag, c as u64, i as u64]);
                let mut img = render_instance(c, spec.num_classes, spec.image_size, &mut r);
                if let Some(shift) = shift {
                    apply_shift(&mut img, shift, &mut r);
                }
                let img = RgbImage::from_rgb8(img.width, img.height, &img.to_rgb8()).expect("same size");
                ImageSample {
                    image: img,
                    label: Some(c),
                    domain: domain.to_string(),
                    id: format!("{}/img_{i:04}.png", classes[c]),
                }
            })
            .collect();
        DatasetSplit {
            samples,
            classes: classes.clone(),
            domain: domain.to_string(),
        }
    };
    Ok((
        render(SOURCE_DOMAIN, rng::TAG_SOURCE, None),
        render(TARGET_DOMAIN, rng::TAG_TARGET, Some(&spec.domain_shift)),
    ))
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: &'static str,
    seed: u64,
    spec: &'a SynthSpec,
    classes: &'a [String],
    domains: [&'static str; 2],
}

/// Renders both domains and writes them under `out_dir` with a `manifest.json`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let (source, target) = render_synthetic(spec)?;
    for split in [&source, &target] {
        let root = out_dir.join(&split.domain);
        for class in &split.classes {
            let dir = root.join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        split
            .samples
            .par_iter()
            .try_for_each(|s| write_png(&root.join(&s.id), &s.image))?;
    }
    let manifest = Manifest {
        generator: "mvcons synthetic glyphs v1",
        seed: spec.seed,
        spec,
        classes: &source.classes,
        domains: [SOURCE_DOMAIN, TARGET_DOMAIN],
    };
    let path = out_dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok((source, target))
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let encode_err = |e: png::EncodingError| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = enc.write_header().map_err(encode_err)?;
        w.write_image_data(&img.to_rgb8()).map_err(encode_err)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes an 8-bit RGB PNG.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |m: String| Error::Decode {
        path: path.to_path_buf(),
        message: m,
    };
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| decode_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| decode_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(format!(
            "expected 8-bit RGB, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    RgbImage::from_rgb8(info.width as usize, info.height as usize, &buf)
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let keep = if want_dirs {
            path.is_dir()
        } else {
            path.is_file()
                && path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        };
        if keep {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `<dir>/<class>/*.png`. Class ids follow the lexicographic order of
/// the class directory names; images are resized to `image_size`.
pub fn load_image_folder(dir: &Path, image_size: usize) -> Result<DatasetSplit> {
    let class_dirs = sorted_entries(dir, true)?;
    let classes: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut files = Vec::new();
    for (label, cdir) in class_dirs.iter().enumerate() {
        for f in sorted_entries(cdir, false)? {
            files.push((label, f));
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG images under {}", dir.display())));
    }
    let domain = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let samples = files
        .par_iter()
        .map(|(label, path)| {
            let img = read_png(path)?;
            let img = if img.width == image_size && img.height == image_size {
                img
            } else {
                img.resize(image_size, image_size)
            };
            let id = format!(
                "{}/{}",
                classes[*label],
                path.file_name().unwrap_or_default().to_string_lossy()
            );
            Ok(ImageSample {
                image: img,
                label: Some(*label),
                domain: domain.clone(),
                id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        samples,
        classes,
        domain,
    })
}

/// Index batches for one epoch: a shuffle keyed by `(seed, epoch)`, cut into
/// `batch_size` chunks with the short remainder kept.
pub fn iterate_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_BATCHES, epoch]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_and_partition() {
        let b = iterate_batches(10, 4, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(iterate_batches(10, 0, 3, 0).is_err());
    }

    #[test]
    fn batch_order_keyed_by_seed_and_epoch() {
        let a = iterate_batches(20, 4, 1, 0).unwrap();
        assert_eq!(a, iterate_batches(20, 4, 1, 0).unwrap());
        assert_ne!(a, iterate_batches(20, 4, 1, 1).unwrap());
    }

    #[test]
    fn class_names_sort_in_label_order() {
        let names = class_names(12);
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn every_glyph_is_distinct() {
        let grid: Vec<Vec<bool>> = (0..GLYPHS.len())
            .map(|k| {
                (0..40 * 40)
                    .map(|i| glyph_contains(k, (i % 40) as f32 / 20.0 - 1.0, (i / 40) as f32 / 20.0 - 1.0))
                    .collect()
            })
            .collect();
        for a in 0..grid.len() {
            for b in a + 1..grid.len() {
                let diff = grid[a].iter().zip(&grid[b]).filter(|(x, y)| x != y).count();
                assert!(diff > 100, "glyphs {a} and {b} differ in only {diff} cells");
            }
        }
    }

    #[test]
    fn render_counts_and_labels() {
        let spec = SynthSpec {
            num_classes: 3,
            per_class: 2,
            image_size: 16,
            ..Default::default()
        };
        let (s, t) = render_synthetic(&spec).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(t.len(), 6);
        assert!(s.is_labeled());
        assert_eq!(s.samples[3].label, Some(1));
        assert!(s.samples.iter().all(|x| x.image.data.iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(t.without_labels().samples.iter().all(|x| x.label.is_none()));
    }
}
