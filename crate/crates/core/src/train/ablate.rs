//! Backbone x loss ablation in the four-row layout of the published table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::flops::model_cost;
use crate::model::ModelConfig;

use super::config::ExperimentConfig;
use super::eval::evaluate;
use super::train;

/// Input size at which the GFLOPs column is profiled.
pub const ABLATION_IMGSZ: usize = 640;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub mobilenetv4: bool,
    pub slideloss: bool,
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub flops: u64,
    pub gflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "\u{2713}" } else { "-" };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<3} {:^11} {:^9} {:>9} {:>7} {:>7} {:>9} {:>8}",
            "#", "MobileNetv4", "SlideLoss", "Precision", "Recall", "mAP50", "mAP50-95", "Gflops"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<3} {:^11} {:^9} {:>9.3} {:>7.3} {:>7.3} {:>9.3} {:>8.3}",
                r.index,
                mark(r.mobilenetv4),
                mark(r.slideloss),
                r.precision,
                r.recall,
                r.map50,
                r.map50_95,
                r.gflops
            );
        }
        out
    }
}

/// Trains and evaluates the four (backbone, loss) combinations with the same
/// seed and budget. `base` supplies the UIB model and every training setting;
/// `baseline` is the CSP backbone model used by rows 1 and 3.
pub fn ablate(
    train_set: &Dataset,
    eval_set: &Dataset,
    base: &ExperimentConfig,
    baseline: &ModelConfig,
) -> Result<AblationTable> {
    let grid = [(false, false), (true, false), (false, true), (true, true)];
    let mut rows = Vec::with_capacity(4);
    for (k, (mobilenetv4, slideloss)) in grid.into_iter().enumerate() {
        let mut cfg = base.clone();
        if !mobilenetv4 {
            cfg.model = baseline.clone();
        }
        cfg.loss.use_slide = slideloss;
        cfg.train.eval_every = 0;
        let out = train(&cfg, train_set, None)?;
        let report = evaluate(&out.checkpoint.model, eval_set, &cfg.eval)?.report;
        let cost = model_cost(&out.checkpoint.model, ABLATION_IMGSZ, ABLATION_IMGSZ)?;
        rows.push(AblationRow {
            index: k + 1,
            mobilenetv4,
            slideloss,
            model: cfg.model.name.clone(),
            precision: report.precision,
            recall: report.recall,
            map50: report.map50,
            map50_95: report.map50_95,
            flops: cost.total_flops,
            gflops: cost.gflops,
        });
    }
    Ok(AblationTable { rows })
}
