use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::tensor::Tensor;

use super::spec::HEAD_STRIDES;

/// A predicted box with its class and confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f32,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Box for cell `(i, j)` from raw left/top/right/bottom distance logits.
///
/// Distances are `softplus(raw)` in stride units, measured from the cell
/// centre `((j + 0.5) * stride, (i + 0.5) * stride)`.
pub fn decode_box(raw: [f64; 4], i: usize, j: usize, stride: usize) -> BBox {
    let s = stride as f64;
    let cx = j as f64 + 0.5;
    let cy = i as f64 + 0.5;
    let [l, t, r, b] = raw.map(softplus);
    BBox::new(
        ((cx - l) * s) as f32,
        ((cy - t) * s) as f32,
        ((cx + r) * s) as f32,
        ((cy + b) * s) as f32,
    )
}

/// Every cell's decoded box for one scale, indexed `[(n * H + i) * W + j]`.
#[derive(Clone, Debug)]
pub struct DecodedGrid {
    pub stride: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
}

impl DecodedGrid {
    pub fn new(map: &Tensor<f32>, stride: usize) -> Result<Self> {
        let (n, c, h, w) = map.dims4()?;
        if c < 5 {
            return Err(Error::usage(format!(
                "head map has {c} channels, expected 4 box values and at least one class"
            )));
        }
        let d = map.data();
        let mut boxes = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let at = |ch: usize| d[((b * c + ch) * h + i) * w + j] as f64;
                    boxes.push(decode_box([at(0), at(1), at(2), at(3)], i, j, stride));
                }
            }
        }
        Ok(DecodedGrid {
            stride,
            batch: n,
            height: h,
            width: w,
            boxes,
        })
    }

    pub fn get(&self, n: usize, i: usize, j: usize) -> BBox {
        self.boxes[(n * self.height + i) * self.width + j]
    }
}

/// Decodes the three head maps into per-image detections.
///
/// Each cell proposes one detection: the class with the largest logit, with
/// confidence `sigmoid(logit)`. Cells below `conf_threshold` and degenerate
/// boxes are dropped. The output is in scale, then row-major cell order.
pub fn decode_predictions(maps: &[Tensor<f32>], conf_threshold: f32) -> Result<Vec<Vec<Detection>>> {
    if maps.len() != HEAD_STRIDES.len() {
        return Err(Error::usage(format!(
            "expected {} head maps, got {}",
            HEAD_STRIDES.len(),
            maps.len()
        )));
    }
    let batch = maps[0].dims4()?.0;
    let mut out = vec![Vec::new(); batch];
    for (map, &stride) in maps.iter().zip(HEAD_STRIDES.iter()) {
        let (n, c, h, w) = map.dims4()?;
        if n != batch || c != maps[0].shape()[1] {
            return Err(Error::usage("head maps disagree on batch size or channels"));
        }
        let d = map.data();
        for (b, dets) in out.iter_mut().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let at = |ch: usize| d[((b * c + ch) * h + i) * w + j];
                    let mut best = 4;
                    for ch in 5..c {
                        if at(ch) > at(best) {
                            best = ch;
                        }
                    }
                    let conf = sigmoid(at(best) as f64) as f32;
                    if conf < conf_threshold {
                        continue;
                    }
                    let raw = [0, 1, 2, 3].map(|ch| at(ch) as f64);
                    let bbox = decode_box(raw, i, j, stride);
                    if !bbox.is_valid() {
                        continue;
                    }
                    dets.push(Detection {
                        bbox,
                        class_id: best - 4,
                        confidence: conf,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections are visited by descending confidence (stable for ties); one is
/// kept iff its IoU with every kept detection of the same class is below
/// `iou_threshold`. The result is in descending confidence order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) < iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}
