//! Deterministic training loop, evaluation driver and the four-way ablation.
//!
//! One step: letterboxed batch, training-mode forward pass, target
//! assignment against the current predictions, detection loss, backward
//! pass, gradient clipping, optimiser update, batch-norm statistics, then
//! the `mu` update. Every random choice comes from ChaCha8 streams of the
//! configured seed, so a run is a pure function of its config and data.

mod ablate;
mod config;
mod eval;
mod optim;

pub use ablate::{ablate, AblationRow, AblationTable, ABLATION_IMGSZ};
pub use config::{DataConfig, EvalConfig, ExperimentConfig, OptimizerKind, TrainConfig};
pub use eval::{detect, evaluate, predict_detections, EvalOutput};
pub use optim::{clip_grad_norm, global_norm, learning_rate, Optimizer};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{assign_targets, detection_loss, SlideState};
use crate::model::{apply_bn_updates, build_msyolo, Checkpoint, DecodedGrid, Model, ParamId, Session, HEAD_STRIDES};
use crate::tensor::Tensor;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
        box_loss: f64,
        cls_loss: f64,
        mean_cls_bce: f64,
        num_positives: usize,
        grad_norm: f64,
        /// `mu` used for this step's weights; absent when SlideLoss is off.
        mu: Option<f64>,
    },
    Epoch {
        epoch: usize,
        step: usize,
        precision: f64,
        recall: f64,
        map50: f64,
        map50_95: f64,
    },
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialise") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: "<train log>".into(),
                    line: i + 1,
                    column: e.column(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainLog { records })
    }

    /// Training loss of every step, in order.
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    /// `mu` trace; empty when SlideLoss was off.
    pub fn mu_trace(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { mu, .. } => *mu,
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Number of optimiser steps and warmup length a config implies for a
/// dataset of `n` images.
pub fn step_budget(cfg: &TrainConfig, n: usize) -> (usize, usize) {
    let per_epoch = n.div_ceil(cfg.batch_size).max(1);
    let total = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    (total, cfg.warmup_steps.unwrap_or(3 * per_epoch))
}

/// Image order and flips of one epoch.
fn epoch_plan(seed: u64, epoch: usize, n: usize, fliplr: f64) -> (Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let flips = (0..n).map(|_| fliplr > 0.0 && rng.gen_bool(fliplr)).collect();
    (order, flips)
}

/// Trains a freshly initialised model.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset, eval_set: Option<&Dataset>) -> Result<TrainOutcome> {
    train_with(cfg, dataset, eval_set, &mut |_| {})
}

/// [`train`], reporting each log record as it is produced.
pub fn train_with(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    eval_set: Option<&Dataset>,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    for ds in std::iter::once(dataset).chain(eval_set) {
        if ds.num_classes() != cfg.model.num_classes {
            return Err(Error::validation(format!(
                "class count mismatch: model has {} classes, dataset has {}",
                cfg.model.num_classes,
                ds.num_classes()
            )));
        }
    }
    let t = &cfg.train;
    let mut model = build_msyolo(&cfg.model, t.seed)?;
    let mut slide = SlideState::new(cfg.mu_init, cfg.mu_momentum);
    let mut opt = Optimizer::new(t.optimizer, t.weight_decay, &model.params);
    let mut log = TrainLog::default();
    let (total, warmup) = step_budget(t, dataset.len());
    let mut record = |log: &mut TrainLog, r: LogRecord| {
        on_record(&r);
        log.push(r);
    };

    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let (order, flips) = epoch_plan(t.seed, epoch, dataset.len(), t.fliplr);
        for chunk in order.chunks(t.batch_size) {
            if step >= total {
                break;
            }
            let chunk_flips: Vec<bool> = chunk.iter().map(|&i| flips[i]).collect();
            let (x, targets) = dataset.batch(chunk, &chunk_flips)?;
            let lr = learning_rate(step, total, warmup, t.lr0, t.lrf);
            let out = train_step(&model, &slide, cfg, &x, &targets).map_err(|e| match e {
                Error::NonFinite { component } => Error::Diverged {
                    step,
                    reason: format!("non-finite {component} loss"),
                    last_good: Box::new(model.clone()),
                },
                other => other,
            })?;
            let StepOutput {
                mut grads,
                bn_updates,
                ious,
                breakdown,
            } = out;
            let grad_norm = clip_grad_norm(&mut grads, t.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite gradient norm".into(),
                    last_good: Box::new(model),
                });
            }
            opt.step(&mut model.params, &grads, lr);
            apply_bn_updates(&mut model.params, &bn_updates);
            let mu = cfg.loss.use_slide.then_some(slide.mu);
            if cfg.loss.use_slide {
                slide.update(&ious);
            }
            record(
                &mut log,
                LogRecord::Step {
                    step,
                    epoch,
                    lr,
                    loss: breakdown.total,
                    box_loss: breakdown.box_loss,
                    cls_loss: breakdown.cls_loss,
                    mean_cls_bce: breakdown.mean_cls_bce,
                    num_positives: breakdown.num_positives,
                    grad_norm,
                    mu,
                },
            );
            step += 1;
        }
        let last = step >= total;
        if let Some(ev) = eval_set {
            if t.eval_every > 0 && ((epoch + 1) % t.eval_every == 0 || last) {
                let r = evaluate(&model, ev, &cfg.eval)?.report;
                record(
                    &mut log,
                    LogRecord::Epoch {
                        epoch,
                        step,
                        precision: r.precision,
                        recall: r.recall,
                        map50: r.map50,
                        map50_95: r.map50_95,
                    },
                );
            }
        }
        epoch += 1;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            slide,
            step: step as u64,
        },
        log,
    })
}

struct StepOutput {
    grads: Vec<(ParamId, Tensor<f32>)>,
    bn_updates: Vec<crate::model::BnUpdate>,
    ious: Vec<f64>,
    breakdown: crate::loss::LossBreakdown,
}

/// Forward and backward pass for one batch; leaves the model untouched.
fn train_step(
    model: &Model,
    slide: &SlideState,
    cfg: &ExperimentConfig,
    x: &Tensor<f32>,
    targets: &[Vec<crate::loss::Target>],
) -> Result<StepOutput> {
    let mut s = Session::new(&model.params, true);
    let xv = s.tape.constant(x.clone());
    let maps = model.graph.forward(&mut s, xv)?;
    let grids = maps
        .iter()
        .zip(HEAD_STRIDES)
        .map(|(&m, stride)| DecodedGrid::new(s.tape.value(m), stride))
        .collect::<Result<Vec<_>>>()?;
    let assignments = assign_targets(&grids, targets);
    let (loss, breakdown) = detection_loss(&mut s.tape, &maps, &assignments, slide, &cfg.loss)?;
    let g = s.tape.backward(loss)?;
    let grads = s
        .param_vars()
        .filter_map(|(id, v)| g.get(v).map(|t| (id, t.clone())))
        .collect();
    Ok(StepOutput {
        grads,
        bn_updates: s.take_bn_updates(),
        ious: assignments.iter().map(|a| a.pair_iou).collect(),
        breakdown,
    })
}
