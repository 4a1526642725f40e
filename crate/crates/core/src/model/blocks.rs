//! YOLOv8 building blocks used by the neck and the baseline backbone.

use crate::error::Result;
use crate::tensor::Var;

use super::layers::{ConvBlock, Describer, LayerKind, Shape};
use super::params::{ParamBuilder, Session};
use super::spec::Activation;

/// Two 3x3 conv blocks with an optional residual add.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    fn new(pb: &mut ParamBuilder, name: &str, c: usize, shortcut: bool) -> Self {
        Bottleneck {
            cv1: ConvBlock::new(pb, &format!("{name}.cv1"), c, c, 3, 1, 1, Activation::Relu6),
            cv2: ConvBlock::new(pb, &format!("{name}.cv2"), c, c, 3, 1, 1, Activation::Relu6),
            shortcut,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.cv1.forward(s, x)?;
        let y = self.cv2.forward(s, y)?;
        if self.shortcut {
            s.tape.add(y, x)
        } else {
            Ok(y)
        }
    }

    fn describe(&self, d: &mut Describer, name: &str, input: Shape) -> Result<Shape> {
        let y = self.cv1.describe(d, &format!("{name}.cv1"), input)?;
        let y = self.cv2.describe(d, &format!("{name}.cv2"), y)?;
        if self.shortcut {
            d.push(format!("{name}.residual"), LayerKind::Add, y)
        } else {
            Ok(y)
        }
    }
}

/// Split into two halves, run `n` bottlenecks on the second half, concatenate
/// every intermediate and fuse with a 1x1 conv.
#[derive(Clone, Debug)]
pub struct C2f {
    pub hidden: usize,
    pub cv1: ConvBlock,
    pub blocks: Vec<Bottleneck>,
    pub cv2: ConvBlock,
}

impl C2f {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, n: usize, shortcut: bool) -> Self {
        let hidden = (c_out / 2).max(1);
        let cv1 = ConvBlock::new(pb, &format!("{name}.cv1"), c_in, 2 * hidden, 1, 1, 1, Activation::Relu6);
        let blocks = (0..n)
            .map(|i| Bottleneck::new(pb, &format!("{name}.m{i}"), hidden, shortcut))
            .collect();
        let cv2 = ConvBlock::new(
            pb,
            &format!("{name}.cv2"),
            (2 + n) * hidden,
            c_out,
            1,
            1,
            1,
            Activation::Relu6,
        );
        C2f {
            hidden,
            cv1,
            blocks,
            cv2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.cv1.forward(s, x)?;
        let mut last = s.tape.slice_channels(y, self.hidden, self.hidden)?;
        let mut cat = y;
        for b in &self.blocks {
            last = b.forward(s, last)?;
            cat = s.tape.concat_channels(cat, last)?;
        }
        self.cv2.forward(s, cat)
    }

    pub fn describe(&self, d: &mut Describer, name: &str, input: Shape) -> Result<Shape> {
        let y = self.cv1.describe(d, &format!("{name}.cv1"), input)?;
        let mut last = d.push(
            format!("{name}.split"),
            LayerKind::Slice {
                start: self.hidden,
                len: self.hidden,
            },
            y,
        )?;
        let mut cat = y;
        for (i, b) in self.blocks.iter().enumerate() {
            last = b.describe(d, &format!("{name}.m{i}"), last)?;
            cat = d.push(format!("{name}.cat{i}"), LayerKind::Concat { c_other: last[0] }, cat)?;
        }
        self.cv2.describe(d, &format!("{name}.cv2"), cat)
    }
}

/// Fast spatial pyramid pooling: three chained stride-1 max-pools whose
/// outputs are concatenated with the input.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub k: usize,
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

impl Sppf {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let hidden = (c_in / 2).max(1);
        Sppf {
            k,
            cv1: ConvBlock::new(pb, &format!("{name}.cv1"), c_in, hidden, 1, 1, 1, Activation::Relu6),
            cv2: ConvBlock::new(pb, &format!("{name}.cv2"), 4 * hidden, c_out, 1, 1, 1, Activation::Relu6),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.cv1.forward(s, x)?;
        let mut cat = y;
        let mut p = y;
        for _ in 0..3 {
            p = s.tape.max_pool2d(p, self.k, 1, self.k / 2)?;
            cat = s.tape.concat_channels(cat, p)?;
        }
        self.cv2.forward(s, cat)
    }

    pub fn describe(&self, d: &mut Describer, name: &str, input: Shape) -> Result<Shape> {
        let y = self.cv1.describe(d, &format!("{name}.cv1"), input)?;
        let mut cat = y;
        let mut p = y;
        for i in 0..3 {
            p = d.push(
                format!("{name}.pool{i}"),
                LayerKind::MaxPool {
                    k: self.k,
                    stride: 1,
                    padding: self.k / 2,
                },
                p,
            )?;
            cat = d.push(format!("{name}.cat{i}"), LayerKind::Concat { c_other: p[0] }, cat)?;
        }
        self.cv2.describe(d, &format!("{name}.cv2"), cat)
    }
}
