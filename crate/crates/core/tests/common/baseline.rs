//! Random toy batches and a closed-form, unweighted detection loss.

use std::f64::consts::PI;

use msyolo::geometry::BBox;
use msyolo::loss::{assign_targets, detection_loss, AssignedTarget, LossConfig, SlideState, Target};
use msyolo::model::{DecodedGrid, HEAD_STRIDES};
use msyolo::tensor::{Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub struct ToyBatch {
    pub maps: Vec<Tensor<f32>>,
    pub num_classes: usize,
    pub assignments: Vec<AssignedTarget>,
}

/// Random head maps for a 128x128 batch plus ground truth assigned against
/// them; box sizes span all three heads.
pub fn toy_batch(rng: &mut ChaCha8Rng) -> ToyBatch {
    let size = 128;
    let n = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=4);
    let maps: Vec<Tensor<f32>> = HEAD_STRIDES
        .iter()
        .map(|&s| {
            let shape = [n, 4 + m, size / s, size / s];
            let len = shape.iter().product();
            let data = (0..len).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        })
        .collect();
    let targets: Vec<Vec<Target>> = (0..n)
        .map(|_| {
            (0..rng.gen_range(0..=5))
                .map(|_| {
                    let w = rng.gen_range(4.0f32..110.0);
                    let h = rng.gen_range(4.0f32..110.0);
                    let x = rng.gen_range(0.0..size as f32 - w);
                    let y = rng.gen_range(0.0..size as f32 - h);
                    Target {
                        bbox: BBox::new(x, y, x + w, y + h),
                        class_id: rng.gen_range(0..m),
                    }
                })
                .collect()
        })
        .collect();
    let grids: Vec<DecodedGrid> = maps
        .iter()
        .zip(HEAD_STRIDES)
        .map(|(t, s)| DecodedGrid::new(t, s).unwrap())
        .collect();
    ToyBatch {
        assignments: assign_targets(&grids, &targets),
        maps,
        num_classes: m,
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// CIoU of two `[x1, y1, x2, y2]` boxes.
fn ciou(p: [f64; 4], g: [f64; 4]) -> f64 {
    let inter = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0) * (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let (pw, ph, gw, gh) = (p[2] - p[0], p[3] - p[1], g[2] - g[0], g[3] - g[1]);
    let iou = inter / (pw * ph + gw * gh - inter);
    let rho2 = ((p[0] + p[2] - g[0] - g[2]) / 2.0).powi(2) + ((p[1] + p[3] - g[1] - g[3]) / 2.0).powi(2);
    let c2 = (p[2].max(g[2]) - p[0].min(g[0])).powi(2) + (p[3].max(g[3]) - p[1].min(g[1])).powi(2);
    let v = 4.0 / (PI * PI) * ((gw / gh).atan() - (pw / ph).atan()).powi(2);
    let alpha = v / (1.0 - iou + v);
    1.0 - iou + rho2 / c2 + alpha * v
}

fn bce(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// `(lambda_box * sum CIoU + lambda_cls * sum BCE) / max(1, positives)` with
/// every sample weight equal to one.
pub fn baseline_loss(batch: &ToyBatch, lambda_box: f64, lambda_cls: f64) -> f64 {
    let m = batch.num_classes;
    let mut box_sum = 0.0;
    let mut cls_sum = 0.0;
    for (scale, map) in batch.maps.iter().enumerate() {
        let (n, c, h, w) = map.dims4().unwrap();
        let at = |b: usize, ch: usize, i: usize, j: usize| map.data()[((b * c + ch) * h + i) * w + j] as f64;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let pos = batch
                        .assignments
                        .iter()
                        .find(|a| (a.image, a.scale_index, a.i, a.j) == (b, scale, i, j));
                    for k in 0..m {
                        let t = pos.map_or(0.0, |a| (a.gt_class == k) as u8 as f64);
                        cls_sum += bce(at(b, 4 + k, i, j), t);
                    }
                    if let Some(a) = pos {
                        let s = HEAD_STRIDES[scale] as f64;
                        let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
                        let d = |ch| softplus(at(b, ch, i, j));
                        let p = [cx - d(0), cy - d(1), cx + d(2), cy + d(3)];
                        let g = a.gt_box;
                        let g = [g.x_min, g.y_min, g.x_max, g.y_max].map(|v| v as f64 / s);
                        box_sum += ciou(p, g);
                    }
                }
            }
        }
    }
    let norm = batch.assignments.len().max(1) as f64;
    (lambda_box * box_sum + lambda_cls * cls_sum) / norm
}

/// Worst relative gap, over `trials` toy batches, between the loss with the
/// slide weighting on at `mu`, the loss with it off, and [`baseline_loss`].
pub fn baseline_gap(trials: u64, mu: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = toy_batch(&mut rng);
        let state = SlideState::new(mu, 0.05);
        let mut totals = Vec::new();
        for use_slide in [true, false] {
            let cfg = LossConfig {
                use_slide,
                ..LossConfig::default()
            };
            let mut tape = Tape::<f64>::new();
            let v: Vec<_> = batch.maps.iter().map(|t| tape.leaf(t.cast(), true)).collect();
            let (_, br) = detection_loss(&mut tape, &[v[0], v[1], v[2]], &batch.assignments, &state, &cfg).unwrap();
            totals.push(br.total);
        }
        let cfg = LossConfig::default();
        let want = baseline_loss(&batch, cfg.lambda_box, cfg.lambda_cls);
        for got in totals {
            worst = worst.max((got - want).abs() / want.abs().max(1e-12));
        }
    }
    worst
}
