//! Image decoding beyond the core formats, and box overlays.

use std::path::Path;

use msyolo::data::{read_image, GrayImage};
use msyolo::model::Detection;
use msyolo::{Error, Result};

/// Reads PGM and raw f32 natively; PNG, JPEG and TIFF through `image`,
/// converted to single-channel intensity in `[0, 1]`.
pub fn read_any(path: &Path) -> Result<GrayImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if matches!(ext.as_str(), "pgm" | "f32") {
        return read_image(path);
    }
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Validation(format!("{}: {other}", path.display())),
    })?;
    let gray = img.to_luma16();
    let (w, h) = gray.dimensions();
    Ok(GrayImage {
        width: w as usize,
        height: h as usize,
        data: gray.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    })
}

/// Copy of `img` with one-pixel box outlines at full intensity.
pub fn draw_boxes(img: &GrayImage, dets: &[Detection]) -> GrayImage {
    let mut out = img.clone();
    let (w, h) = (img.width as i64, img.height as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            out.set(x as usize, y as usize, 1.0);
        }
    };
    for d in dets {
        let b = d.bbox;
        let (x0, y0) = (b.x_min.floor() as i64, b.y_min.floor() as i64);
        let (x1, y1) = ((b.x_max.ceil() as i64 - 1).max(x0), (b.y_max.ceil() as i64 - 1).max(y0));
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    out
}
