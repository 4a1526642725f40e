//! Single-channel images: binary PGM and raw f32 containers, letterboxing and
//! horizontal flips.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Padding value used by the letterbox.
pub const LETTERBOX_FILL: f32 = 114.0 / 255.0;

const RAW_MAGIC: &[u8; 8] = b"MSYRAW1\0";

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        GrayImage {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel-centre coordinates, clamped to the
    /// border.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f32, y - y0 as f32);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn hflip(&self) -> GrayImage {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
            .expect("image buffer matches its shape")
    }
}

/// Mirrors a box inside an image of the given width.
pub fn hflip_box(b: &BBox, width: f32) -> BBox {
    BBox::new(width - b.x_max, b.y_min, width - b.x_min, b.y_max)
}

fn pgm_err(path: &Path, msg: &str) -> Error {
    Error::validation(format!("{}: {msg}", path.display()))
}

/// Decodes a binary (P5) PGM with 8- or 16-bit samples.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    if token() != Some(b"P5".as_slice()) {
        return Err(pgm_err(path, "not a binary PGM (expected P5)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| std::str::from_utf8(t).ok()?.parse().ok())
            .ok_or_else(|| pgm_err(path, &format!("bad PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(pgm_err(path, "PGM dimensions or maxval out of range"));
    }
    let data_start = pos + 1;
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = width * height * depth;
    let body = bytes
        .get(data_start..data_start + need)
        .ok_or_else(|| pgm_err(path, "truncated PGM data"))?;
    let maxval_f = maxval as f32;
    let data = if depth == 1 {
        body.iter().map(|&v| (v as f32 / maxval_f).min(1.0)).collect()
    } else {
        body.chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / maxval_f).min(1.0))
            .collect()
    };
    Ok(GrayImage { width, height, data })
}

/// Encodes as 8-bit binary PGM.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Raw container: magic, u32 LE width and height, then f32 LE samples.
pub fn encode_raw(img: &GrayImage) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    out.extend((img.width as u32).to_le_bytes());
    out.extend((img.height as u32).to_le_bytes());
    for v in &img.data {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(pgm_err(path, "not a raw image container"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if width == 0 || height == 0 || body.len() != width * height * 4 {
        return Err(pgm_err(path, "raw image size does not match its header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(GrayImage { width, height, data })
}

/// Reads `.pgm` or `.f32` files.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let bytes = || std::fs::read(path).map_err(|e| Error::io(path, e));
    match ext.as_str() {
        "pgm" => decode_pgm(&bytes()?, path),
        "f32" => decode_raw(&bytes()?, path),
        _ => Err(Error::usage(format!(
            "{}: unsupported image format `{ext}` (supported: pgm, f32)",
            path.display()
        ))),
    }
}

/// Maps source-pixel coordinates to letterboxed ones: `x' = x * scale + pad_x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f32,
    pub pad_x: f32,
    pub pad_y: f32,
    pub target: usize,
}

impl LetterboxTransform {
    pub fn forward(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x_min * self.scale + self.pad_x,
            b.y_min * self.scale + self.pad_y,
            b.x_max * self.scale + self.pad_x,
            b.y_max * self.scale + self.pad_y,
        )
    }

    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x_min - self.pad_x) / self.scale,
            (b.y_min - self.pad_y) / self.scale,
            (b.x_max - self.pad_x) / self.scale,
            (b.y_max - self.pad_y) / self.scale,
        )
    }
}

/// Transform and resized extent for a `width x height` source.
pub fn letterbox_geometry(width: usize, height: usize, target: usize) -> (LetterboxTransform, usize, usize) {
    let scale = target as f32 / width.max(height) as f32;
    let nw = ((width as f32 * scale).round() as usize).clamp(1, target);
    let nh = ((height as f32 * scale).round() as usize).clamp(1, target);
    let tf = LetterboxTransform {
        scale,
        pad_x: ((target - nw) / 2) as f32,
        pad_y: ((target - nh) / 2) as f32,
        target,
    };
    (tf, nw, nh)
}

/// Scales the longest side to `target` and pads the other symmetrically.
pub fn letterbox(img: &GrayImage, target: usize) -> Result<(GrayImage, LetterboxTransform)> {
    if target == 0 || !target.is_multiple_of(32) {
        let up = target.div_ceil(32).max(1) * 32;
        return Err(Error::usage(format!(
            "letterbox size {target} is not divisible by 32; try {up}"
        )));
    }
    let (tf, nw, nh) = letterbox_geometry(img.width, img.height, target);
    let (left, top) = (tf.pad_x as usize, tf.pad_y as usize);
    let scale = tf.scale;
    let mut out = GrayImage::new(target, target, LETTERBOX_FILL);
    let identity = nw == img.width && nh == img.height;
    for y in 0..nh {
        for x in 0..nw {
            let v = if identity {
                img.get(x, y)
            } else {
                img.sample((x as f32 + 0.5) / scale - 0.5, (y as f32 + 0.5) / scale - 0.5)
            };
            out.set(x + left, y + top, v);
        }
    }
    Ok((out, tf))
}
