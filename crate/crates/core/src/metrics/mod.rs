//! Detection evaluation: greedy matching, precision/recall, 101-point
//! interpolated AP, mAP50 and mAP50-95.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::loss::Target;
use crate::model::Detection;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Outcome of one detection at one IoU threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchRecord {
    pub detection: usize,
    pub confidence: f32,
    pub class_id: usize,
    pub true_positive: bool,
    pub matched_gt: Option<usize>,
}

/// Greedy matching within one image.
///
/// Detections are visited by descending confidence, ties by ascending index.
/// Each takes the unmatched same-class ground truth with the highest IoU
/// (ties to the lower index) and is a true positive iff that IoU strictly
/// exceeds `iou_threshold`. Records come back in visiting order.
pub fn match_detections(dets: &[Detection], gts: &[Target], iou_threshold: f64) -> Vec<MatchRecord> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let d = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.class_id != d.class_id {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            let matched = best.filter(|&(_, v)| v > iou_threshold).map(|(gi, _)| gi);
            if let Some(gi) = matched {
                taken[gi] = true;
            }
            MatchRecord {
                detection: di,
                confidence: d.confidence,
                class_id: d.class_id,
                true_positive: matched.is_some(),
                matched_gt: matched,
            }
        })
        .collect()
}

/// Cumulative precision and recall over a ranked list of TP/FP flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

pub fn precision_recall(flags: &[bool], num_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
    }
    PrCurve { precision, recall }
}

/// 101-point interpolated AP: the mean over `t = 0.00, 0.01, ..., 1.00` of
/// the best precision reached at recall `>= t`, or 0 where recall never
/// reaches `t`.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let n = curve.precision.len();
    // right-to-left running maximum makes the envelope non-increasing
    let mut envelope = curve.precision.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        while k < n && curve.recall[k] < t {
            k += 1;
        }
        if k < n {
            sum += envelope[k];
        }
    }
    sum / 101.0
}

/// `(mAP50, mAP50-95)` from per-class APs at [`IOU_THRESHOLDS`].
pub fn map_all(per_class: &[[f64; 10]]) -> Result<(f64, f64)> {
    if per_class.is_empty() {
        return Err(Error::validation("no class has ground-truth instances to evaluate"));
    }
    let n = per_class.len() as f64;
    let map50 = per_class.iter().map(|a| a[0]).sum::<f64>() / n;
    let map = per_class.iter().map(|a| a.iter().sum::<f64>() / 10.0).sum::<f64>() / n;
    Ok((map50, map))
}

/// Precision and recall at the prefix with the highest F1 (the first one on
/// ties); zeros when there are no detections or no true positives.
pub fn best_f1_point(curve: &PrCurve) -> (f64, f64) {
    let mut best = (0.0, 0.0, 0.0);
    for (&p, &r) in curve.precision.iter().zip(&curve.recall) {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > best.0 {
            best = (f1, p, r);
        }
    }
    (best.1, best.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub name: String,
    /// Images with at least one instance of the class.
    pub images: usize,
    pub instances: usize,
    pub detections: usize,
    /// `None` for classes without ground truth, which are left out of means.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub instances: usize,
    /// Mean precision and recall over evaluable classes.
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub classes: Vec<ClassRow>,
}

/// Per-class APs at every threshold plus the operating-point P/R.
struct ClassEval {
    aps: [f64; 10],
    precision: f64,
    recall: f64,
    detections: usize,
}

/// Evaluates detections against ground truth, one list per image.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<Target>],
    class_names: &[String],
) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::usage(format!(
            "{} prediction lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::validation("cannot evaluate an empty dataset"));
    }
    let m = class_names.len();
    if let Some(bad) = dets
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .chain(gts.iter().flatten().map(|g| g.class_id))
        .find(|&c| c >= m)
    {
        return Err(Error::validation(format!(
            "class id {bad} out of range for {m} classes"
        )));
    }

    // ranked (confidence desc, image asc, detection asc) TP flags per class
    let mut flags: Vec<[Vec<bool>; 10]> = (0..m).map(|_| Default::default()).collect();
    let mut ranked: Vec<Vec<(f32, usize, usize)>> = vec![Vec::new(); m];
    for (img, d) in dets.iter().enumerate() {
        for (di, det) in d.iter().enumerate() {
            ranked[det.class_id].push((det.confidence, img, di));
        }
    }
    for r in &mut ranked {
        r.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    }
    for (t, &thr) in IOU_THRESHOLDS.iter().enumerate() {
        let per_image: Vec<Vec<bool>> = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| {
                let mut tp = vec![false; d.len()];
                for rec in match_detections(d, g, thr) {
                    tp[rec.detection] = rec.true_positive;
                }
                tp
            })
            .collect();
        for (c, r) in ranked.iter().enumerate() {
            flags[c][t] = r.iter().map(|&(_, img, di)| per_image[img][di]).collect();
        }
    }

    let mut evals = Vec::with_capacity(m);
    let mut instances = vec![0usize; m];
    let mut images = vec![0usize; m];
    for g in gts {
        let mut seen = vec![false; m];
        for t in g {
            instances[t.class_id] += 1;
            seen[t.class_id] = true;
        }
        for (c, s) in seen.into_iter().enumerate() {
            images[c] += s as usize;
        }
    }
    for c in 0..m {
        let mut aps = [0.0; 10];
        let mut op = (0.0, 0.0);
        for t in 0..10 {
            let curve = precision_recall(&flags[c][t], instances[c]);
            aps[t] = average_precision(&curve);
            if t == 0 {
                op = best_f1_point(&curve);
            }
        }
        evals.push(ClassEval {
            aps,
            precision: op.0,
            recall: op.1,
            detections: ranked[c].len(),
        });
    }

    let evaluable: Vec<usize> = (0..m).filter(|&c| instances[c] > 0).collect();
    let per_class: Vec<[f64; 10]> = evaluable.iter().map(|&c| evals[c].aps).collect();
    let (map50, map50_95) = map_all(&per_class)?;
    let k = evaluable.len() as f64;
    let classes = (0..m)
        .map(|c| {
            let e = &evals[c];
            let ok = instances[c] > 0;
            ClassRow {
                class_id: c,
                name: class_names[c].clone(),
                images: images[c],
                instances: instances[c],
                detections: e.detections,
                precision: ok.then_some(e.precision),
                recall: ok.then_some(e.recall),
                ap50: ok.then_some(e.aps[0]),
                ap50_95: ok.then(|| e.aps.iter().sum::<f64>() / 10.0),
            }
        })
        .collect();
    Ok(EvalReport {
        images: gts.len(),
        instances: instances.iter().sum(),
        precision: evaluable.iter().map(|&c| evals[c].precision).sum::<f64>() / k,
        recall: evaluable.iter().map(|&c| evals[c].recall).sum::<f64>() / k,
        map50,
        map50_95,
        classes,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl EvalReport {
    /// Aligned plain-text table: one row per class plus an `all` row.
    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "Class", "Pictures", "Instances", "P", "R", "mAP50", "mAP50-95"
        );
        let _ = writeln!(
            out,
            "{:<width$} {:>8} {:>9} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            "all", self.images, self.instances, self.precision, self.recall, self.map50, self.map50_95
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<width$} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
                c.name,
                c.images,
                c.instances,
                cell(c.precision),
                cell(c.recall),
                cell(c.ap50),
                cell(c.ap50_95)
            );
        }
        out
    }
}

/// One line of the predictions JSON-lines format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub confidence: f32,
    /// `[x_min, y_min, x_max, y_max]` in source pixels.
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

impl PredictionRecord {
    pub fn new(image_id: u64, d: &Detection) -> Self {
        let b = d.bbox;
        PredictionRecord {
            image_id,
            class_id: d.class_id,
            confidence: d.confidence,
            bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
        }
    }

    pub fn detection(&self) -> Detection {
        let [a, b, c, d] = self.bbox;
        Detection {
            bbox: BBox::new(a, b, c, d),
            class_id: self.class_id,
            confidence: self.confidence,
        }
    }
}

/// Parses predictions in JSON-lines form; blank lines are ignored.
pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(Error::validation(format!(
                "{}:{}: confidence {} outside [0, 1]",
                path.display(),
                i + 1,
                rec.confidence
            )));
        }
        out.push(rec);
    }
    Ok(out)
}
