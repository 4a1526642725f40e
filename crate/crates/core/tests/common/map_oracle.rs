//! Naive mAP reference: class-first, one global ranked pass, direct
//! 101-point integration. Shares nothing with the evaluator but the types.

use msyolo::geometry::BBox;
use msyolo::loss::Target;
use msyolo::model::Detection;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleClass {
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// `None` for classes without ground truth.
    pub classes: Vec<Option<OracleClass>>,
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = |b: &BBox| b.x_max as f64 - b.x_min as f64;
    let h = |b: &BBox| b.y_max as f64 - b.y_min as f64;
    if w(a) <= 0.0 || h(a) <= 0.0 || w(b) <= 0.0 || h(b) <= 0.0 {
        return 0.0;
    }
    let ix = (a.x_max.min(b.x_max) as f64 - a.x_min.max(b.x_min) as f64).max(0.0);
    let iy = (a.y_max.min(b.y_max) as f64 - a.y_min.max(b.y_min) as f64).max(0.0);
    let inter = ix * iy;
    inter / (w(a) * h(a) + w(b) * h(b) - inter)
}

/// TP flags for class `c` at `thr`, in global rank order.
fn ranked_flags(dets: &[Vec<Detection>], gts: &[Vec<Target>], c: usize, thr: f64) -> Vec<bool> {
    let mut order = Vec::new();
    for (img, list) in dets.iter().enumerate() {
        for (k, d) in list.iter().enumerate() {
            if d.class_id == c {
                order.push((d.confidence, img, k));
            }
        }
    }
    // Descending confidence, then image, then detection index.
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            let (x, y) = (order[a], order[b]);
            let swap = y.0 > x.0 || (y.0 == x.0 && (y.1, y.2) < (x.1, x.2));
            if swap {
                order.swap(a, b);
            }
        }
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::new();
    for &(_, img, k) in &order {
        let d = &dets[img][k];
        let mut pick = None;
        let mut best = -1.0;
        for (g, t) in gts[img].iter().enumerate() {
            if t.class_id == c && !used[img][g] {
                let v = overlap(&d.bbox, &t.bbox);
                if v > best {
                    best = v;
                    pick = Some(g);
                }
            }
        }
        let tp = pick.is_some() && best > thr;
        if tp {
            used[img][pick.unwrap()] = true;
        }
        flags.push(tp);
    }
    flags
}

fn curve(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    (0..flags.len())
        .map(|k| {
            let tp = flags[..=k].iter().filter(|&&f| f).count();
            (tp as f64 / (k + 1) as f64, tp as f64 / n_gt as f64)
        })
        .collect()
}

fn ap(pr: &[(f64, f64)]) -> f64 {
    let mut sum = 0.0;
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let best = pr
            .iter()
            .filter(|&&(_, r)| r >= t)
            .map(|&(p, _)| p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

fn best_f1(pr: &[(f64, f64)]) -> (f64, f64) {
    let mut best = (0.0, 0.0, 0.0);
    for &(p, r) in pr {
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f > best.0 {
            best = (f, p, r);
        }
    }
    (best.1, best.2)
}

pub fn oracle(dets: &[Vec<Detection>], gts: &[Vec<Target>], num_classes: usize) -> OracleReport {
    let thresholds = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
    let mut classes = Vec::new();
    for c in 0..num_classes {
        let n_gt = gts.iter().flatten().filter(|t| t.class_id == c).count();
        if n_gt == 0 {
            classes.push(None);
            continue;
        }
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&thr| ap(&curve(&ranked_flags(dets, gts, c, thr), n_gt)))
            .collect();
        let (precision, recall) = best_f1(&curve(&ranked_flags(dets, gts, c, 0.5), n_gt));
        classes.push(Some(OracleClass {
            precision,
            recall,
            ap50: aps[0],
            ap50_95: aps.iter().sum::<f64>() / 10.0,
        }));
    }
    let present: Vec<&OracleClass> = classes.iter().flatten().collect();
    let n = present.len() as f64;
    let mean = |f: &dyn Fn(&OracleClass) -> f64| present.iter().map(|c| f(c)).sum::<f64>() / n;
    OracleReport {
        precision: mean(&|c| c.precision),
        recall: mean(&|c| c.recall),
        map50: mean(&|c| c.ap50),
        map50_95: mean(&|c| c.ap50_95),
        classes,
    }
}

fn int_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0..16) as f32;
    let y = rng.gen_range(0..16) as f32;
    BBox::new(x, y, x + rng.gen_range(1..6) as f32, y + rng.gen_range(1..6) as f32)
}

/// At most 5 images, 5 ground truths and 10 detections on an integer grid,
/// with coarse confidences so that ties and exact-threshold IoUs occur.
pub fn micro_dataset(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Target>>, usize) {
    let images = rng.gen_range(1..=5);
    let m = rng.gen_range(1..=3);
    let mut gts: Vec<Vec<Target>> = vec![Vec::new(); images];
    for _ in 0..rng.gen_range(1..=5) {
        let img = rng.gen_range(0..images);
        gts[img].push(Target {
            bbox: int_box(rng),
            class_id: rng.gen_range(0..m),
        });
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); images];
    for _ in 0..rng.gen_range(0..=10) {
        let img = rng.gen_range(0..images);
        let near = gts[img].choose(rng).copied();
        let (bbox, class_id) = match near {
            Some(t) if rng.gen_bool(0.7) => {
                let mut j = || rng.gen_range(-1..=1) as f32;
                let b = BBox::new(t.bbox.x_min + j(), t.bbox.y_min + j(), t.bbox.x_max + j(), t.bbox.y_max + j());
                let b = if b.is_valid() { b } else { t.bbox };
                let c = if rng.gen_bool(0.85) { t.class_id } else { rng.gen_range(0..m) };
                (b, c)
            }
            _ => (int_box(rng), rng.gen_range(0..m)),
        };
        dets[img].push(Detection {
            bbox,
            class_id,
            confidence: rng.gen_range(1..=10) as f32 / 10.0,
        });
    }
    (dets, gts, m)
}
