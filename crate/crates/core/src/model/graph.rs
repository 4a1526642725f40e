use crate::error::{Error, Result};
use crate::tensor::Var;

use super::blocks::{C2f, Sppf};
use super::layers::{Conv, ConvBlock, Describer, LayerDesc, LayerKind, Shape};
use super::params::{ParamBuilder, Session};
use super::spec::{Activation, ModelConfig, StageSpec, UibSpec, HEAD_STRIDES};
use super::uib::{build_uib, UibBlock};

/// Initial class-logit bias: sigmoid(-ln 99) = 0.01.
pub const CLASS_PRIOR_BIAS: f32 = -4.59512;

#[derive(Clone, Debug)]
pub enum Stage {
    Conv(ConvBlock),
    Uib(Vec<UibBlock>),
    C2f(C2f),
    Sppf(Sppf),
}

impl Stage {
    fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        match self {
            Stage::Conv(b) => b.forward(s, x),
            Stage::Uib(blocks) => {
                for b in blocks {
                    x = b.forward(s, x)?;
                }
                Ok(x)
            }
            Stage::C2f(b) => b.forward(s, x),
            Stage::Sppf(b) => b.forward(s, x),
        }
    }

    fn describe(&self, d: &mut Describer, name: &str, mut x: Shape) -> Result<Shape> {
        match self {
            Stage::Conv(b) => b.describe(d, name, x),
            Stage::Uib(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    x = b.describe(d, &format!("{name}.{i}"), x)?;
                }
                Ok(x)
            }
            Stage::C2f(b) => b.describe(d, name, x),
            Stage::Sppf(b) => b.describe(d, name, x),
        }
    }
}

/// Decoupled head for one scale: a box branch and a class branch, each two
/// 3x3 conv blocks and a biased 1x1 output conv.
#[derive(Clone, Debug)]
pub struct Head {
    pub box_convs: [ConvBlock; 2],
    pub box_out: Conv,
    pub cls_convs: [ConvBlock; 2],
    pub cls_out: Conv,
}

impl Head {
    fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_box: usize, c_cls: usize, m: usize) -> Self {
        let branch = |pb: &mut ParamBuilder, tag: &str, c: usize| {
            [
                ConvBlock::new(pb, &format!("{name}.{tag}0"), c_in, c, 3, 1, 1, Activation::Relu6),
                ConvBlock::new(pb, &format!("{name}.{tag}1"), c, c, 3, 1, 1, Activation::Relu6),
            ]
        };
        let box_convs = branch(pb, "box", c_box);
        let box_out = Conv::new(pb, &format!("{name}.box_out"), c_box, 4, 1, 1, 1, true);
        let cls_convs = branch(pb, "cls", c_cls);
        let cls_out = Conv::new(pb, &format!("{name}.cls_out"), c_cls, m, 1, 1, 1, true);
        if let Some(b) = cls_out.bias {
            for v in pb.store.get_mut(b).data_mut() {
                *v = CLASS_PRIOR_BIAS;
            }
        }
        Head {
            box_convs,
            box_out,
            cls_convs,
            cls_out,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut b = x;
        for c in &self.box_convs {
            b = c.forward(s, b)?;
        }
        let b = self.box_out.forward(s, b)?;
        let mut c = x;
        for cb in &self.cls_convs {
            c = cb.forward(s, c)?;
        }
        let c = self.cls_out.forward(s, c)?;
        s.tape.concat_channels(b, c)
    }

    fn describe(&self, d: &mut Describer, name: &str, x: Shape) -> Result<Shape> {
        let mut b = x;
        for (i, c) in self.box_convs.iter().enumerate() {
            b = c.describe(d, &format!("{name}.box{i}"), b)?;
        }
        let b = self.box_out.describe(d, &format!("{name}.box_out"), b)?;
        let mut c = x;
        for (i, cb) in self.cls_convs.iter().enumerate() {
            c = cb.describe(d, &format!("{name}.cls{i}"), c)?;
        }
        let c = self.cls_out.describe(d, &format!("{name}.cls_out"), c)?;
        d.push(format!("{name}.cat"), LayerKind::Concat { c_other: c[0] }, b)
    }
}

/// YOLOv8 path-aggregation neck: a top-down pass with upsample + concat,
/// then a bottom-up pass with strided 3x3 convs.
#[derive(Clone, Debug)]
pub struct Neck {
    pub td4: C2f,
    pub td3: C2f,
    pub down3: ConvBlock,
    pub bu4: C2f,
    pub down4: ConvBlock,
    pub bu5: C2f,
}

/// The executable network: backbone stages, neck and three heads.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub input_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<Stage>,
    /// Index of the stage whose output feeds the neck at strides 8, 16, 32.
    pub taps: [usize; 3],
    pub neck: Neck,
    pub heads: [Head; 3],
}

/// Builds the network described by `config` and registers its parameters.
pub fn build_graph(config: &ModelConfig, pb: &mut ParamBuilder) -> Result<ModelGraph> {
    config.validate()?;
    let mut c = config.input_channels;
    let mut stride = 1;
    let mut stages = Vec::new();
    let mut stage_stride = Vec::new();
    let mut stage_channels = Vec::new();
    for (i, spec) in config.backbone.iter().enumerate() {
        let name = format!("backbone.{i}");
        let stage = match spec {
            StageSpec::Conv(b) => {
                let c_out = config.scaled(b.c_out);
                let blk = ConvBlock::new(pb, &name, c, c_out, b.k, b.s, 1, b.activation);
                c = c_out;
                Stage::Conv(blk)
            }
            StageSpec::Uib(u) => {
                let c_out = config.scaled(u.c_out);
                let mut blocks = Vec::with_capacity(u.repeat);
                for j in 0..u.repeat {
                    let spec = UibSpec {
                        k1: u.k1,
                        k2: u.k2,
                        s: if j == 0 { u.s } else { 1 },
                        r: u.r,
                        c_in: c,
                        c_out,
                    };
                    blocks.push(build_uib(pb, &format!("{name}.{j}"), &spec)?);
                    c = c_out;
                }
                Stage::Uib(blocks)
            }
            StageSpec::C2f(b) => {
                let c_out = config.scaled(b.c_out);
                let blk = C2f::new(pb, &name, c, c_out, b.n, b.shortcut);
                c = c_out;
                Stage::C2f(blk)
            }
            StageSpec::Sppf(b) => Stage::Sppf(Sppf::new(pb, &name, c, c, b.k)),
        };
        stride *= spec.stride();
        stages.push(stage);
        stage_stride.push(stride);
        stage_channels.push(c);
    }

    let mut taps = [0; 3];
    for (t, &want) in HEAD_STRIDES.iter().enumerate() {
        match stage_stride.iter().rposition(|&s| s == want) {
            Some(i) => taps[t] = i,
            None => {
                let mut achievable = stage_stride.clone();
                achievable.dedup();
                return Err(Error::config(format!(
                    "backbone has no stage at stride {want}; achievable strides are {achievable:?}, \
                     heads need {HEAD_STRIDES:?}"
                )));
            }
        }
    }
    if stride != 32 {
        return Err(Error::config(format!(
            "backbone ends at stride {stride}, the last head needs 32"
        )));
    }

    let [n3, n4, n5] = config.neck_channels.map(|ch| config.scaled(ch));
    let [p3, p4, p5] = taps.map(|i| stage_channels[i]);
    let d = config.neck_depth;
    let neck = Neck {
        td4: C2f::new(pb, "neck.td4", p5 + p4, n4, d, false),
        td3: C2f::new(pb, "neck.td3", n4 + p3, n3, d, false),
        down3: ConvBlock::new(pb, "neck.down3", n3, n3, 3, 2, 1, Activation::Relu6),
        bu4: C2f::new(pb, "neck.bu4", n3 + n4, n4, d, false),
        down4: ConvBlock::new(pb, "neck.down4", n4, n4, 3, 2, 1, Activation::Relu6),
        bu5: C2f::new(pb, "neck.bu5", n4 + p5, n5, d, false),
    };
    let (cb, cc) = (config.scaled(config.box_channels), config.scaled(config.cls_channels));
    let m = config.num_classes;
    let heads = [
        Head::new(pb, "head.p3", n3, cb, cc, m),
        Head::new(pb, "head.p4", n4, cb, cc, m),
        Head::new(pb, "head.p5", n5, cb, cc, m),
    ];
    Ok(ModelGraph {
        input_channels: config.input_channels,
        num_classes: m,
        stages,
        taps,
        neck,
        heads,
    })
}

/// Smallest size at or above `x` that is divisible by 32.
pub fn next_multiple_of_32(x: usize) -> usize {
    x.div_ceil(32).max(1) * 32
}

impl ModelGraph {
    fn check_input(&self, c: usize, h: usize, w: usize) -> Result<bool> {
        if !h.is_multiple_of(32) || !w.is_multiple_of(32) || h == 0 || w == 0 {
            return Err(Error::usage(format!(
                "input size {h}x{w} is not divisible by 32; letterbox to {}x{}",
                next_multiple_of_32(h),
                next_multiple_of_32(w)
            )));
        }
        if c == self.input_channels {
            Ok(false)
        } else if c == 1 && self.input_channels == 3 {
            Ok(true)
        } else {
            Err(Error::usage(format!(
                "image has {c} channels, the model expects {}",
                self.input_channels
            )))
        }
    }

    /// Raw head maps `(N, 4 + M, H / s, W / s)` for strides 8, 16, 32.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<[Var; 3]> {
        let (_, c, h, w) = s.tape.value(x).dims4()?;
        let mut x = x;
        if self.check_input(c, h, w)? {
            let two = s.tape.concat_channels(x, x)?;
            x = s.tape.concat_channels(two, x)?;
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.forward(s, x)?;
            feats.push(x);
        }
        let [p3, p4, p5] = self.taps.map(|i| feats[i]);
        let n = &self.neck;
        let up = s.tape.upsample_nearest_2x(p5)?;
        let cat = s.tape.concat_channels(up, p4)?;
        let t4 = n.td4.forward(s, cat)?;
        let up = s.tape.upsample_nearest_2x(t4)?;
        let cat = s.tape.concat_channels(up, p3)?;
        let o3 = n.td3.forward(s, cat)?;
        let dn = n.down3.forward(s, o3)?;
        let cat = s.tape.concat_channels(dn, t4)?;
        let o4 = n.bu4.forward(s, cat)?;
        let dn = n.down4.forward(s, o4)?;
        let cat = s.tape.concat_channels(dn, p5)?;
        let o5 = n.bu5.forward(s, cat)?;
        Ok([
            self.heads[0].forward(s, o3)?,
            self.heads[1].forward(s, o4)?,
            self.heads[2].forward(s, o5)?,
        ])
    }

    /// Shape inference without running the network: every primitive layer in
    /// execution order and the three head output shapes.
    pub fn describe(&self, input: Shape) -> Result<(Vec<LayerDesc>, [Shape; 3])> {
        let [c, h, w] = input;
        let mut d = Describer::default();
        let mut x = input;
        if self.check_input(c, h, w)? {
            x = d.push("input.replicate0", LayerKind::Concat { c_other: 1 }, x)?;
            x = d.push("input.replicate1", LayerKind::Concat { c_other: 1 }, x)?;
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.describe(&mut d, &format!("backbone.{i}"), x)?;
            feats.push(x);
        }
        let [p3, p4, p5] = self.taps.map(|i| feats[i]);
        let n = &self.neck;
        let up = d.push("neck.up5", LayerKind::Upsample2x, p5)?;
        let cat = d.push("neck.cat4", LayerKind::Concat { c_other: p4[0] }, up)?;
        let t4 = n.td4.describe(&mut d, "neck.td4", cat)?;
        let up = d.push("neck.up4", LayerKind::Upsample2x, t4)?;
        let cat = d.push("neck.cat3", LayerKind::Concat { c_other: p3[0] }, up)?;
        let o3 = n.td3.describe(&mut d, "neck.td3", cat)?;
        let dn = n.down3.describe(&mut d, "neck.down3", o3)?;
        let cat = d.push("neck.cat_bu4", LayerKind::Concat { c_other: t4[0] }, dn)?;
        let o4 = n.bu4.describe(&mut d, "neck.bu4", cat)?;
        let dn = n.down4.describe(&mut d, "neck.down4", o4)?;
        let cat = d.push("neck.cat_bu5", LayerKind::Concat { c_other: p5[0] }, dn)?;
        let o5 = n.bu5.describe(&mut d, "neck.bu5", cat)?;
        let outs = [
            self.heads[0].describe(&mut d, "head.p3", o3)?,
            self.heads[1].describe(&mut d, "head.p4", o4)?,
            self.heads[2].describe(&mut d, "head.p5", o5)?,
        ];
        Ok((d.layers, outs))
    }

    /// True for descriptor rows that belong to the backbone.
    pub fn is_backbone_layer(name: &str) -> bool {
        name.starts_with("backbone.") || name.starts_with("input.")
    }
}
