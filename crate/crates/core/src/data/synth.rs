//! Synthetic thermal scenes: warm blurred shapes on a noisy cool background,
//! with exact boxes.
//!
//! Class `c` draws shape `c % 4` (rectangle, disc, triangle, vertical bar).
//! Per-image content depends only on `(seed, index)`; class labels come from
//! a seed-level stream, so any image can be regenerated on its own.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationSet, Category, GroundTruthInstance, ImageInfo, FLIR_CLASSES};
use super::image::{encode_pgm, GrayImage};
use super::stats::apportion;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Disc,
    Triangle,
    Bar,
}

impl Shape {
    pub fn for_class(c: usize) -> Shape {
        [Shape::Rect, Shape::Disc, Shape::Triangle, Shape::Bar][c % 4]
    }

    /// Width and height for a nominal size.
    fn extent(self, size: f32, aspect: f32) -> (f32, f32) {
        match self {
            Shape::Rect => (size * aspect, size / aspect),
            Shape::Disc => (size, size),
            Shape::Triangle => (size * 1.1, size * 0.9),
            Shape::Bar => (size * 0.4, size * 1.2),
        }
    }

    /// Whether the point `(u, v)`, relative to the box and scaled to the unit
    /// square, lies inside the shape.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Rect | Shape::Bar => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
            Shape::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.25,
            Shape::Triangle => (0.0..1.0).contains(&v) && (u - 0.5).abs() < 0.5 * v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub width: usize,
    pub height: usize,
    /// Target share of instances per class; must sum to 1.
    pub class_frequencies: Vec<f64>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Nominal object size range in pixels.
    pub min_size: f32,
    pub max_size: f32,
    pub noise_std: f32,
    pub blur_sigma: f32,
}

impl SynthConfig {
    /// Uniform classes on 160x128 frames.
    pub fn new(seed: u64, n_images: usize, num_classes: usize) -> Self {
        SynthConfig {
            seed,
            n_images,
            width: 160,
            height: 128,
            class_frequencies: vec![1.0 / num_classes.max(1) as f64; num_classes],
            min_objects: 1,
            max_objects: 4,
            min_size: 12.0,
            max_size: 44.0,
            noise_std: 0.03,
            blur_sigma: 0.8,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_frequencies.len()
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_frequencies.iter().sum();
        if self.class_frequencies.is_empty()
            || self.class_frequencies.iter().any(|f| !(*f >= 0.0))
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(Error::usage(format!(
                "class frequencies must be non-negative and sum to 1, got {:?}",
                self.class_frequencies
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::usage("synthetic frames must be at least 16x16"));
        }
        if self.min_objects > self.max_objects || self.min_size <= 2.0 || self.min_size > self.max_size {
            return Err(Error::usage("inconsistent object count or size range"));
        }
        let longest = self.max_size * 1.3;
        if longest >= self.width.min(self.height) as f32 {
            return Err(Error::usage("max_size does not fit in the frame"));
        }
        Ok(())
    }
}

/// Class names for `m` classes: the nine thermal classes when `m == 9`,
/// otherwise `class0 .. class{m-1}`.
pub fn synth_class_names(m: usize) -> Vec<String> {
    if m == FLIR_CLASSES.len() {
        FLIR_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..m).map(|c| format!("class{c}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub images: Vec<GrayImage>,
    /// Images are listed in generation order, ids `0..n`.
    pub annotations: AnnotationSet,
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &GrayImage, sigma: f32) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = GrayImage::new(img.width, img.height, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v: f32 = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.get((x + i as i64 - r).clamp(0, w - 1) as usize, y as usize))
                .sum();
            tmp.set(x as usize, y as usize, v);
        }
    }
    let mut out = GrayImage::new(img.width, img.height, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v: f32 = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp.get(x as usize, (y + i as i64 - r).clamp(0, h - 1) as usize))
                .sum();
            out.set(x as usize, y as usize, v);
        }
    }
    out
}

/// Object placements of one image, before class labels are attached.
fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(f32, f32, f32, f32)> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<(f32, f32, f32, f32)> = Vec::with_capacity(n);
    for _ in 0..n {
        for _attempt in 0..50 {
            let size = rng.gen_range(cfg.min_size..=cfg.max_size);
            let aspect = rng.gen_range(0.8f32..1.25);
            let slack = 1.3 * size;
            let x = rng.gen_range(1.0..cfg.width as f32 - slack);
            let y = rng.gen_range(1.0..cfg.height as f32 - slack);
            let cand = (x, y, size, aspect);
            let b = BBox::new(x - 2.0, y - 2.0, x + slack + 2.0, y + slack + 2.0);
            if placed
                .iter()
                .all(|&(px, py, ps, _)| iou(&b, &BBox::new(px, py, px + 1.3 * ps, py + 1.3 * ps)) == 0.0)
            {
                placed.push(cand);
                break;
            }
        }
    }
    placed
}

/// Generates a corpus; the output is a pure function of the config.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let layouts: Vec<_> = (0..cfg.n_images)
        .map(|i| {
            let mut rng = image_rng(cfg.seed, i);
            let l = layout(cfg, &mut rng);
            (rng, l)
        })
        .collect();
    let total: usize = layouts.iter().map(|(_, l)| l.len()).sum();
    let counts = apportion(total, &cfg.class_frequencies);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
    labels.shuffle(&mut image_rng(cfg.seed, usize::MAX - 1));
    let mut labels = labels.into_iter();

    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).map_err(|e| Error::usage(e.to_string()))?;
    let names = synth_class_names(cfg.num_classes());
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut instances = Vec::with_capacity(total);
    for (index, (mut rng, objects)) in layouts.into_iter().enumerate() {
        let (w, h) = (cfg.width, cfg.height);
        let base = rng.gen_range(0.15f32..0.3);
        let gx = rng.gen_range(-0.08f32..0.08);
        let gy = rng.gen_range(-0.08f32..0.08);
        let mut heat = GrayImage::new(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let v = base + gx * x as f32 / w as f32 + gy * y as f32 / h as f32;
                heat.set(x, y, v);
            }
        }
        for (x0, y0, size, aspect) in objects {
            let class_id = labels.next().expect("one label per object");
            let shape = Shape::for_class(class_id);
            let (bw, bh) = shape.extent(size, aspect);
            let temp = rng.gen_range(0.6f32..0.9);
            let (xa, ya) = (x0.floor() as usize, y0.floor() as usize);
            let (xb, yb) = (((x0 + bw).ceil() as usize).min(w), ((y0 + bh).ceil() as usize).min(h));
            for y in ya..yb {
                for x in xa..xb {
                    let u = (x as f32 + 0.5 - x0) / bw;
                    let v = (y as f32 + 0.5 - y0) / bh;
                    if shape.contains(u, v) {
                        heat.set(x, y, temp);
                    }
                }
            }
            instances.push(GroundTruthInstance {
                id: instances.len() as u64,
                image_id: index as u64,
                category_id: class_id as u64 + 1,
                class_id: Some(class_id),
                xywh: [x0, y0, bw, bh],
            });
        }
        let mut img = gaussian_blur(&heat, cfg.blur_sigma);
        for v in img.data.iter_mut() {
            let n = *v + noise.sample(&mut rng);
            *v = ((n.clamp(0.0, 1.0) * 255.0).round()) / 255.0;
        }
        images.push(img);
    }
    let annotations = AnnotationSet {
        images: (0..cfg.n_images)
            .map(|i| ImageInfo {
                id: i as u64,
                file_name: format!("images/{i:06}.pgm"),
                width: cfg.width as u32,
                height: cfg.height as u32,
            })
            .collect(),
        instances,
        categories: names
            .iter()
            .enumerate()
            .map(|(c, n)| Category {
                id: c as u64 + 1,
                name: n.clone(),
            })
            .collect(),
        class_names: names,
    };
    Ok(SynthDataset { images, annotations })
}

/// Writes `annotations.json` and `images/*.pgm` under `dir`; returns the
/// written paths in order.
pub fn write_synth(dir: &Path, data: &SynthDataset) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(data.images.len() + 1);
    for (info, img) in data.annotations.images.iter().zip(&data.images) {
        let path = dir.join(&info.file_name);
        write_atomic(&path, &encode_pgm(img))?;
        written.push(path);
    }
    let ann = dir.join("annotations.json");
    write_atomic(&ann, data.annotations.to_json().as_bytes())?;
    written.push(ann);
    Ok(written)
}
