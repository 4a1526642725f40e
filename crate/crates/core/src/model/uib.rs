use crate::error::Result;
use crate::tensor::Var;

use super::layers::{ConvBlock, Describer, LayerKind, Shape};
use super::params::{ParamBuilder, Session};
use super::spec::{Activation, UibSpec};

/// Universal inverted bottleneck:
/// `[dw k1] -> 1x1 expand -> [dw k2] -> 1x1 project`, plus a residual add
/// when the block keeps both stride and width.
///
/// The stride sits on the second depthwise stage when it exists and on the
/// first one otherwise.
#[derive(Clone, Debug)]
pub struct UibBlock {
    pub spec: UibSpec,
    pub dw1: Option<ConvBlock>,
    pub expand: ConvBlock,
    pub dw2: Option<ConvBlock>,
    pub project: ConvBlock,
}

/// Builds the layer sequence of one UIB block.
pub fn build_uib(pb: &mut ParamBuilder, name: &str, spec: &UibSpec) -> Result<UibBlock> {
    spec.validate()?;
    let UibSpec {
        k1, k2, s, c_in, c_out, ..
    } = *spec;
    let e = spec.expanded();
    let (s1, s2) = if k2 > 0 { (1, s) } else { (s, 1) };
    let dw1 = (k1 > 0).then(|| {
        ConvBlock::new(pb, &format!("{name}.dw1"), c_in, c_in, k1, s1, c_in, Activation::Relu6)
    });
    let expand = ConvBlock::new(pb, &format!("{name}.expand"), c_in, e, 1, 1, 1, Activation::Relu6);
    let dw2 = (k2 > 0)
        .then(|| ConvBlock::new(pb, &format!("{name}.dw2"), e, e, k2, s2, e, Activation::Relu6));
    let project = ConvBlock::new(pb, &format!("{name}.project"), e, c_out, 1, 1, 1, Activation::None);
    Ok(UibBlock {
        spec: spec.clone(),
        dw1,
        expand,
        dw2,
        project,
    })
}

impl UibBlock {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some(dw1) = &self.dw1 {
            y = dw1.forward(s, y)?;
        }
        y = self.expand.forward(s, y)?;
        if let Some(dw2) = &self.dw2 {
            y = dw2.forward(s, y)?;
        }
        y = self.project.forward(s, y)?;
        if self.spec.has_residual() {
            y = s.tape.add(y, x)?;
        }
        Ok(y)
    }

    pub fn describe(&self, d: &mut Describer, name: &str, input: Shape) -> Result<Shape> {
        let mut y = input;
        if let Some(dw1) = &self.dw1 {
            y = dw1.describe(d, &format!("{name}.dw1"), y)?;
        }
        y = self.expand.describe(d, &format!("{name}.expand"), y)?;
        if let Some(dw2) = &self.dw2 {
            y = dw2.describe(d, &format!("{name}.dw2"), y)?;
        }
        y = self.project.describe(d, &format!("{name}.project"), y)?;
        if self.spec.has_residual() {
            y = d.push(format!("{name}.residual"), LayerKind::Add, y)?;
        }
        Ok(y)
    }

    /// The convolution blocks in execution order.
    pub fn blocks(&self) -> Vec<&ConvBlock> {
        let mut v = Vec::with_capacity(4);
        v.extend(self.dw1.as_ref());
        v.push(&self.expand);
        v.extend(self.dw2.as_ref());
        v.push(&self.project);
        v
    }
}
