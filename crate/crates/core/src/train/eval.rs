//! Batched inference, evaluation and single-image detection.

use crate::data::{letterbox, Dataset, GrayImage};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_detections, EvalReport};
use crate::model::{decode_predictions, nms, Detection, Model};
use crate::tensor::Tensor;

use super::config::EvalConfig;

/// Decoded, suppressed and truncated detections for a batch `(N, C, H, W)`.
pub fn predict_detections(model: &Model, images: &Tensor<f32>, cfg: &EvalConfig) -> Result<Vec<Vec<Detection>>> {
    let maps = model.predict(images)?;
    let per_image = decode_predictions(&maps, cfg.conf)?;
    Ok(per_image
        .into_iter()
        .map(|d| {
            let mut kept = nms(&d, cfg.iou);
            kept.truncate(cfg.max_det);
            kept
        })
        .collect())
}

/// Evaluation result plus the detections it was computed from, in
/// letterboxed pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub detections: Vec<Vec<Detection>>,
}

/// Runs the model over every image of `dataset` and scores the detections.
pub fn evaluate(model: &Model, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalOutput> {
    if model.num_classes() != dataset.num_classes() {
        return Err(Error::validation(format!(
            "class count mismatch: checkpoint has {} classes, dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::validation("cannot evaluate an empty dataset"));
    }
    let mut detections = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(cfg.batch_size.max(1)) {
        let (x, t) = dataset.batch(chunk, &[])?;
        detections.extend(predict_detections(model, &x, cfg)?);
        targets.extend(t);
    }
    let report = evaluate_detections(&detections, &targets, &dataset.class_names)?;
    Ok(EvalOutput { report, detections })
}

/// Detections on one source image, mapped back to source pixels and clamped
/// to the frame.
pub fn detect(model: &Model, image: &GrayImage, imgsz: usize, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let (boxed, tf) = letterbox(image, imgsz)?;
    let mut dets = predict_detections(model, &boxed.to_tensor(), cfg)?.remove(0);
    let (w, h) = (image.width as f32, image.height as f32);
    dets.retain_mut(|d| {
        d.bbox = tf.inverse(&d.bbox).clamp(w, h);
        d.bbox.is_valid()
    });
    Ok(dets)
}
