//! SlideLoss weighting, target assignment and the composite detection loss.

mod assign;
mod ciou;
mod slide;

pub use assign::{assign_targets, scale_for_area, AssignedTarget, Target};
pub use ciou::{ciou_loss, ciou_loss_sum, BoxVars};
pub use slide::{slide_weight, update_mu, SlideState, MU_MAX, MU_MIN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HEAD_STRIDES;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_box: f64,
    pub lambda_cls: f64,
    /// Weight positive classification terms by [`slide_weight`]; when off
    /// every weight is 1.
    pub use_slide: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_box: 7.5,
            lambda_cls: 0.5,
            use_slide: true,
        }
    }
}

/// Scalar values of the loss terms, already normalised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `lambda_box * sum(CIoU) / max(1, positives)`.
    pub box_loss: f64,
    /// `lambda_cls * sum(weighted BCE) / max(1, positives)`.
    pub cls_loss: f64,
    /// Weighted BCE averaged over every class-map element.
    pub mean_cls_bce: f64,
    pub num_positives: usize,
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
        })
    }
}

/// Composite detection loss over the three raw head maps `(N, 4 + M, H, W)`:
///
/// ```text
/// total = (lambda_box * sum_pos CIoU
///          + lambda_cls * sum_pos f(iou, mu) * BCE(cls, one_hot)
///          + lambda_cls * sum_neg BCE(cls, 0)) / max(1, #pos)
/// ```
///
/// The slide weights are constants on the tape.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    maps: &[Var; 3],
    assignments: &[AssignedTarget],
    state: &SlideState,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut box_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut elements = 0usize;
    for (scale, (&map, &stride)) in maps.iter().zip(HEAD_STRIDES.iter()).enumerate() {
        let (n, c, h, w) = tape.value(map).dims4()?;
        if c < 5 {
            return Err(Error::usage(format!("head map has {c} channels, need at least 5")));
        }
        let m = c - 4;
        let pos: Vec<&AssignedTarget> = assignments.iter().filter(|a| a.scale_index == scale).collect();
        for a in &pos {
            if a.image >= n || a.i >= h || a.j >= w || a.gt_class >= m {
                return Err(Error::usage(format!(
                    "assignment (image {}, cell {},{}, class {}) outside head map {:?}",
                    a.image,
                    a.i,
                    a.j,
                    a.gt_class,
                    [n, c, h, w]
                )));
            }
        }

        if !pos.is_empty() {
            let p = pos.len();
            let mut side = |ch: usize| -> Result<Var> {
                let idx: Vec<usize> = pos.iter().map(|a| ((a.image * c + ch) * h + a.i) * w + a.j).collect();
                let raw = tape.gather(map, &idx)?;
                Ok(tape.softplus(raw))
            };
            let (l, t, r, b) = (side(0)?, side(1)?, side(2)?, side(3)?);
            let cx: Vec<f64> = pos.iter().map(|a| a.j as f64 + 0.5).collect();
            let cy: Vec<f64> = pos.iter().map(|a| a.i as f64 + 0.5).collect();
            let cx = tape.constant(Tensor::from_f64(&[p], &cx)?);
            let cy = tape.constant(Tensor::from_f64(&[p], &cy)?);
            let pred = BoxVars {
                x1: tape.sub(cx, l)?,
                y1: tape.sub(cy, t)?,
                x2: tape.add(cx, r)?,
                y2: tape.add(cy, b)?,
            };
            // CIoU is scale invariant, so both boxes stay in stride units.
            let s = stride as f64;
            let gts: Vec<[f64; 4]> = pos
                .iter()
                .map(|a| {
                    let g = a.gt_box;
                    [g.x_min, g.y_min, g.x_max, g.y_max].map(|v| v as f64 / s)
                })
                .collect();
            box_terms.push(ciou_loss_sum(tape, &pred, &gts)?);
        }

        let logits = tape.slice_channels(map, 4, m)?;
        let len = n * m * h * w;
        elements += len;
        let mut targets = vec![T::zero(); len];
        let mut weights = vec![T::one(); len];
        for a in &pos {
            let wgt = if cfg.use_slide {
                slide_weight(a.pair_iou, state.mu)
            } else {
                1.0
            };
            for k in 0..m {
                let idx = ((a.image * m + k) * h + a.i) * w + a.j;
                weights[idx] = T::of(wgt);
                if k == a.gt_class {
                    targets[idx] = T::one();
                }
            }
        }
        cls_terms.push(tape.bce_with_logits_sum(logits, targets, weights)?);
    }

    let norm = assignments.len().max(1) as f64;
    let value = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].to_f64().unwrap_or(f64::NAN);
    let sum_terms = |tape: &mut Tape<T>, terms: &[Var]| -> Result<Option<Var>> {
        let mut it = terms.iter().copied();
        let Some(mut acc) = it.next() else {
            return Ok(None);
        };
        for v in it {
            acc = tape.add(acc, v)?;
        }
        Ok(Some(acc))
    };
    let box_sum = sum_terms(tape, &box_terms)?;
    let cls_sum = sum_terms(tape, &cls_terms)?.ok_or_else(|| Error::usage("no head maps"))?;

    let box_raw = box_sum.map_or(0.0, |v| value(tape, v));
    let cls_raw = value(tape, cls_sum);
    let box_loss = finite("box", cfg.lambda_box * box_raw / norm)?;
    let cls_loss = finite("cls", cfg.lambda_cls * cls_raw / norm)?;

    let scaled_cls = tape.mul_scalar(cls_sum, T::of(cfg.lambda_cls / norm));
    let total = match box_sum {
        Some(b) => {
            let scaled_box = tape.mul_scalar(b, T::of(cfg.lambda_box / norm));
            tape.add(scaled_box, scaled_cls)?
        }
        None => scaled_cls,
    };
    let total_value = finite("total", value(tape, total))?;
    Ok((
        total,
        LossBreakdown {
            total: total_value,
            box_loss,
            cls_loss,
            mean_cls_bce: cls_raw / elements.max(1) as f64,
            num_positives: assignments.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn maps(tape: &mut Tape<f64>, m: usize, size: usize, fill: f64) -> [Var; 3] {
        HEAD_STRIDES.map(|s| {
            let hw = size / s;
            tape.leaf(Tensor::full(&[1, 4 + m, hw, hw], fill), true)
        })
    }

    fn positive(pair_iou: f64) -> AssignedTarget {
        AssignedTarget {
            image: 0,
            scale_index: 0,
            i: 1,
            j: 1,
            gt_box: BBox::new(4.0, 4.0, 18.0, 20.0),
            gt_class: 1,
            pair_iou,
        }
    }

    #[test]
    fn no_positives_is_pure_negative_bce() {
        let mut t = Tape::new();
        let m = maps(&mut t, 3, 64, 0.0);
        let (_, b) = detection_loss(&mut t, &m, &[], &SlideState::default(), &LossConfig::default()).unwrap();
        assert!((b.mean_cls_bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(b.box_loss, 0.0);
        assert_eq!(b.num_positives, 0);
    }

    #[test]
    fn flat_branch_equals_baseline() {
        let a = [positive(0.3), AssignedTarget { i: 3, pair_iou: 0.9, ..positive(0.0) }];
        let run = |mu: f64, use_slide: bool| {
            let mut t = Tape::new();
            let m = maps(&mut t, 2, 64, 0.2);
            let cfg = LossConfig { use_slide, ..LossConfig::default() };
            detection_loss(&mut t, &m, &a, &SlideState::new(mu, 0.05), &cfg).unwrap().1
        };
        assert_eq!(run(1.1, true), run(0.5, false));
        assert_ne!(run(0.5, true), run(0.5, false));
    }

    #[test]
    fn hard_positive_bce_scaled_by_weight() {
        let cls_only = LossConfig {
            lambda_box: 0.0,
            ..LossConfig::default()
        };
        // logits very negative everywhere except the positive cell, so the
        // negative terms vanish and the cls loss is the positive term alone
        let run = |use_slide: bool| {
            let mut t = Tape::new();
            let m = maps(&mut t, 2, 64, -40.0);
            let cfg = LossConfig { use_slide, ..cls_only.clone() };
            detection_loss(&mut t, &m, &[positive(0.45)], &SlideState::new(0.5, 0.05), &cfg)
                .unwrap()
                .1
                .cls_loss
        };
        let ratio = run(true) / run(false);
        assert!((ratio - 0.5f64.exp()).abs() < 1e-9, "{ratio}");
    }
}
