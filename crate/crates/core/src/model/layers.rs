use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Var};

use super::params::{BnUpdate, ParamBuilder, ParamId, ParamKind, Session};
use super::spec::Activation;

pub const BN_MOMENTUM: f64 = 0.03;
pub const BN_EPS: f64 = 1e-3;

/// Per-image feature shape `(C, H, W)`.
pub type Shape = [usize; 3];

/// What a primitive layer computes, for shape inference and cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        c_out: usize,
        bias: bool,
    },
    BatchNorm,
    Relu6,
    /// Elementwise sum with a same-shape tensor.
    Add,
    Upsample2x,
    /// Channel concatenation; `c_other` is the width of the appended operand.
    Concat { c_other: usize },
    Slice { start: usize, len: usize },
    MaxPool { k: usize, stride: usize, padding: usize },
    /// A layer the profiler has no cost model for.
    Opaque(String),
}

impl LayerKind {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let [c, h, w] = input;
        Ok(match self {
            LayerKind::Conv {
                k,
                stride,
                padding,
                groups,
                c_out,
                ..
            } => {
                if c % groups != 0 || c_out % groups != 0 {
                    return Err(Error::config(format!(
                        "conv groups {groups} do not divide channels {c} -> {c_out}"
                    )));
                }
                let g = ConvGeometry::new(*stride, *padding, *groups);
                [*c_out, g.output_extent(h, *k)?, g.output_extent(w, *k)?]
            }
            LayerKind::BatchNorm | LayerKind::Relu6 | LayerKind::Add => input,
            LayerKind::Upsample2x => [c, 2 * h, 2 * w],
            LayerKind::Concat { c_other } => [c + c_other, h, w],
            LayerKind::Slice { start, len } => {
                if start + len > c {
                    return Err(Error::config(format!(
                        "slice {start}..{} exceeds {c} channels",
                        start + len
                    )));
                }
                [*len, h, w]
            }
            LayerKind::MaxPool { k, stride, padding } => {
                let g = ConvGeometry::new(*stride, *padding, 1);
                [c, g.output_extent(h, *k)?, g.output_extent(w, *k)?]
            }
            LayerKind::Opaque(name) => {
                return Err(Error::config(format!("no shape rule for opaque layer `{name}`")))
            }
        })
    }
}

/// A primitive layer with its resolved input and output shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
}

/// Collects layer descriptors during shape inference.
#[derive(Debug, Default)]
pub struct Describer {
    pub layers: Vec<LayerDesc>,
}

impl Describer {
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, input: Shape) -> Result<Shape> {
        let output = kind.output_shape(input)?;
        self.layers.push(LayerDesc {
            name: name.into(),
            kind,
            input,
            output,
        });
        Ok(output)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub geom: ConvGeometry,
}

impl Conv {
    /// "Same" padding `k / 2`.
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let weight = pb.he_uniform(&format!("{name}.weight"), &[c_out, c_in / groups, k, k], fan_in);
        let bias = bias.then(|| pb.constant(&format!("{name}.bias"), ParamKind::Weight, c_out, 0.0));
        Conv {
            weight,
            bias,
            k,
            c_in,
            c_out,
            geom: ConvGeometry::new(stride, k / 2, groups),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.geom)
    }

    pub fn kind(&self) -> LayerKind {
        LayerKind::Conv {
            k: self.k,
            stride: self.geom.stride,
            padding: self.geom.padding,
            groups: self.geom.groups,
            c_out: self.c_out,
            bias: self.bias.is_some(),
        }
    }

    pub fn describe(&self, d: &mut Describer, name: &str, input: Shape) -> Result<Shape> {
        d.push(name, self.kind(), input)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: pb.constant(&format!("{name}.gamma"), ParamKind::Weight, c, 1.0),
            beta: pb.constant(&format!("{name}.beta"), ParamKind::Weight, c, 0.0),
            running_mean: pb.constant(&format!("{name}.running_mean"), ParamKind::Buffer, c, 0.0),
            running_var: pb.constant(&format!("{name}.running_var"), ParamKind::Buffer, c, 1.0),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.training() {
            let (y, stats) = s.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            s.record_bn(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: BN_MOMENTUM,
                stats,
            });
            Ok(y)
        } else {
            let params = s.params();
            let rm = params.get(self.running_mean).data();
            let rv = params.get(self.running_var).data();
            s.tape.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)
        }
    }
}

/// Convolution, batch normalisation, optional ReLU6.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub activation: Activation,
}

impl ConvBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        activation: Activation,
    ) -> Self {
        ConvBlock {
            conv: Conv::new(pb, &format!("{name}.conv"), c_in, c_out, k, stride, groups, false),
            bn: BatchNorm::new(pb, &format!("{name}.bn"), c_out),
            activation,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(match self.activation {
            Activation::Relu6 => s.tape.relu6(y),
            Activation::None => y,
        })
    }

    pub fn describe(&self, d: &mut Describer, name: &str, input: Shape) -> Result<Shape> {
        let y = self.conv.describe(d, &format!("{name}.conv"), input)?;
        let y = d.push(format!("{name}.bn"), LayerKind::BatchNorm, y)?;
        match self.activation {
            Activation::Relu6 => d.push(format!("{name}.act"), LayerKind::Relu6, y),
            Activation::None => Ok(y),
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out
    }
}
