//! Analytic cost accounting.
//!
//! Convention: FLOPs = 2 x MACs for layers that multiply and accumulate.
//!
//! | layer        | MACs                          | FLOPs        | params             |
//! |--------------|-------------------------------|--------------|--------------------|
//! | conv         | k^2 (Cin/g) Cout Hout Wout    | 2 MACs       | k^2 (Cin/g) Cout (+Cout) |
//! | batchnorm    | C H W (folded scale + shift)  | 2 C H W      | 2 C                |
//! | ReLU6, add   | 0                             | C H W        | 0                  |
//! | upsample, concat, slice, max-pool | 0        | 0            | 0                  |
//!
//! Totals cover every layer up to the raw head outputs; decoding and NMS are
//! not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerDesc, LayerKind, Model, ModelGraph, Shape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub output: Shape,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

/// Cost of one layer applied to a single `(C, H, W)` input.
pub fn layer_cost(kind: &LayerKind, input: Shape) -> Result<LayerCost> {
    let output = kind.output_shape(input)?;
    let [c, h, w] = input.map(|v| v as u64);
    let elems = output.iter().map(|&v| v as u64).product::<u64>();
    let (macs, flops, params) = match kind {
        LayerKind::Conv {
            k,
            groups,
            c_out,
            bias,
            ..
        } => {
            let (k, g, co) = (*k as u64, *groups as u64, *c_out as u64);
            let weights = k * k * (c / g) * co;
            let macs = weights * output[1] as u64 * output[2] as u64;
            (macs, 2 * macs, weights + if *bias { co } else { 0 })
        }
        LayerKind::BatchNorm => (c * h * w, 2 * c * h * w, 2 * c),
        LayerKind::Relu6 | LayerKind::Add => (0, elems, 0),
        LayerKind::Upsample2x | LayerKind::Concat { .. } | LayerKind::Slice { .. } | LayerKind::MaxPool { .. } => {
            (0, 0, 0)
        }
        LayerKind::Opaque(name) => {
            return Err(Error::config(format!("no cost model for layer `{name}`")));
        }
    };
    Ok(LayerCost {
        output,
        macs,
        flops,
        params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub name: String,
    pub kind: String,
    pub output: Shape,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub model: String,
    pub input: Shape,
    pub rows: Vec<FlopsRow>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_params: u64,
    /// FLOPs of the backbone rows alone.
    pub backbone_flops: u64,
    pub gflops: f64,
}

fn kind_name(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Conv { k, stride, groups, .. } if *groups > 1 => format!("dwconv{k}x{k}/s{stride}"),
        LayerKind::Conv { k, stride, .. } => format!("conv{k}x{k}/s{stride}"),
        LayerKind::BatchNorm => "batchnorm".into(),
        LayerKind::Relu6 => "relu6".into(),
        LayerKind::Add => "add".into(),
        LayerKind::Upsample2x => "upsample2x".into(),
        LayerKind::Concat { .. } => "concat".into(),
        LayerKind::Slice { .. } => "slice".into(),
        LayerKind::MaxPool { k, .. } => format!("maxpool{k}x{k}"),
        LayerKind::Opaque(n) => n.clone(),
    }
}

impl FlopsReport {
    /// Profiles a layer list; totals are sums over the rows.
    pub fn from_layers(model: &str, input: Shape, layers: &[LayerDesc]) -> Result<Self> {
        let mut rows = Vec::with_capacity(layers.len());
        let mut backbone_flops = 0;
        for l in layers {
            let cost = layer_cost(&l.kind, l.input).map_err(|e| match e {
                Error::Config(msg) => Error::config(format!("layer `{}`: {msg}", l.name)),
                other => other,
            })?;
            if ModelGraph::is_backbone_layer(&l.name) {
                backbone_flops += cost.flops;
            }
            rows.push(FlopsRow {
                name: l.name.clone(),
                kind: kind_name(&l.kind),
                output: cost.output,
                macs: cost.macs,
                flops: cost.flops,
                params: cost.params,
            });
        }
        let total_flops = rows.iter().map(|r| r.flops).sum();
        Ok(FlopsReport {
            model: model.to_string(),
            input,
            total_macs: rows.iter().map(|r| r.macs).sum(),
            total_flops,
            total_params: rows.iter().map(|r| r.params).sum(),
            backbone_flops,
            gflops: total_flops as f64 / 1e9,
            rows,
        })
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let [c, h, w] = self.input;
        let _ = writeln!(out, "model {} at input {c}x{h}x{w}", self.model);
        let _ = writeln!(
            out,
            "{:<width$} {:<14} {:>16} {:>14} {:>14} {:>10}",
            "layer", "kind", "output", "MACs", "FLOPs", "params"
        );
        for r in &self.rows {
            let [c, h, w] = r.output;
            let _ = writeln!(
                out,
                "{:<width$} {:<14} {:>16} {:>14} {:>14} {:>10}",
                r.name,
                r.kind,
                format!("{c}x{h}x{w}"),
                r.macs,
                r.flops,
                r.params
            );
        }
        let _ = writeln!(
            out,
            "{:<width$} {:<14} {:>16} {:>14} {:>14} {:>10}",
            "total", "", "", self.total_macs, self.total_flops, self.total_params
        );
        let _ = writeln!(
            out,
            "GFLOPs {:.3} (FLOPs = 2 x MACs), backbone GFLOPs {:.3}",
            self.gflops,
            self.backbone_flops as f64 / 1e9
        );
        out
    }
}

/// Profiles the model at an `h x w` input.
pub fn model_cost(model: &Model, h: usize, w: usize) -> Result<FlopsReport> {
    let (layers, _) = model.describe(h, w)?;
    FlopsReport::from_layers(&model.config.name, [model.config.input_channels, h, w], &layers)
}

/// Ratio of total FLOPs at `(h * factor, w * factor)` to those at `(h, w)`.
pub fn scaling_check(model: &Model, h: usize, w: usize, factor: usize) -> Result<f64> {
    let base = model_cost(model, h, w)?.total_flops;
    let scaled = model_cost(model, h * factor, w * factor)?.total_flops;
    Ok(scaled as f64 / base as f64)
}
