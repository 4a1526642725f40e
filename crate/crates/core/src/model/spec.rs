//! Declarative model description, read from and written to the sectioned
//! config format.

use std::fmt::Write as _;

use crate::config::{Document, Reader};
use crate::error::{Error, Result};

/// Output strides of the three detection heads.
pub const HEAD_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu6,
    None,
}

impl Activation {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "relu6" => Ok(Activation::Relu6),
            "none" => Ok(Activation::None),
            other => Err(Error::config(format!(
                "unknown activation `{other}` (expected relu6 or none)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu6 => "relu6",
            Activation::None => "none",
        }
    }
}

/// Convolution followed by batch normalisation and an optional ReLU6.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockSpec {
    pub k: usize,
    pub s: usize,
    pub c_out: usize,
    pub activation: Activation,
}

/// One universal inverted bottleneck block with resolved channel counts.
///
/// Kernel sizes of `0` drop the corresponding depthwise stage.
#[derive(Clone, Debug, PartialEq)]
pub struct UibSpec {
    pub k1: usize,
    pub k2: usize,
    pub s: usize,
    pub r: f64,
    pub c_in: usize,
    pub c_out: usize,
}

fn check_uib_params(k1: usize, k2: usize, s: usize, r: f64) -> Result<()> {
    for (name, k) in [("k1", k1), ("k2", k2)] {
        if ![0, 3, 5].contains(&k) {
            return Err(Error::config(format!("UIB {name} = {k} is not one of 0, 3, 5")));
        }
    }
    if ![1, 2].contains(&s) {
        return Err(Error::config(format!("UIB stride {s} is not 1 or 2")));
    }
    if s == 2 && k1 == 0 && k2 == 0 {
        return Err(Error::config(
            "UIB stride 2 needs at least one depthwise stage (k1 or k2 > 0)",
        ));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::config(format!("UIB expansion ratio {r} must be positive")));
    }
    Ok(())
}

impl UibSpec {
    pub fn validate(&self) -> Result<()> {
        check_uib_params(self.k1, self.k2, self.s, self.r)?;
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::config("UIB channel counts must be positive"));
        }
        if self.expanded() == 0 {
            return Err(Error::config(format!(
                "UIB expanded width round({} * {}) is zero",
                self.r, self.c_in
            )));
        }
        Ok(())
    }

    /// Internal width after the 1x1 expansion: `round(r * c_in)`.
    pub fn expanded(&self) -> usize {
        (self.r * self.c_in as f64).round() as usize
    }

    pub fn has_residual(&self) -> bool {
        self.s == 1 && self.c_in == self.c_out
    }
}

/// A run of `repeat` UIB blocks; only the first one is strided.
#[derive(Clone, Debug, PartialEq)]
pub struct UibStackSpec {
    pub k1: usize,
    pub k2: usize,
    pub s: usize,
    pub r: f64,
    pub c_out: usize,
    pub repeat: usize,
}

/// Cross-stage partial block with `n` 3x3 bottlenecks (YOLOv8's C2f).
#[derive(Clone, Debug, PartialEq)]
pub struct C2fSpec {
    pub c_out: usize,
    pub n: usize,
    pub shortcut: bool,
}

/// Spatial pyramid pooling, fast variant: three chained max-pools.
#[derive(Clone, Debug, PartialEq)]
pub struct SppfSpec {
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageSpec {
    Conv(ConvBlockSpec),
    Uib(UibStackSpec),
    C2f(C2fSpec),
    Sppf(SppfSpec),
}

impl StageSpec {
    pub fn stride(&self) -> usize {
        match self {
            StageSpec::Conv(c) => c.s,
            StageSpec::Uib(u) => u.s,
            StageSpec::C2f(_) | StageSpec::Sppf(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub input_channels: usize,
    pub num_classes: usize,
    pub width_scale: f64,
    pub backbone: Vec<StageSpec>,
    /// Neck output channels for strides 8, 16, 32 before width scaling.
    pub neck_channels: [usize; 3],
    pub neck_depth: usize,
    pub box_channels: usize,
    pub cls_channels: usize,
}

/// Section names that belong to the model description.
pub const MODEL_SECTIONS: &[&str] = &["model", "conv", "uib", "c2f", "sppf", "neck", "head"];

impl ModelConfig {
    /// Channel count after width scaling, never below one.
    pub fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_scale).round() as usize).max(1)
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        let model = doc
            .unique("model")?
            .ok_or_else(|| Error::config(format!("{}: missing [model] section", doc.path.display())))?;
        let mut r = Reader::new(doc, model);
        let name = r.or("name", "unnamed".to_string())?;
        let input_channels = r.or("input_channels", 1usize)?;
        let num_classes = r.get("num_classes")?;
        let width_scale = r.or("width_scale", 1.0f64)?;
        r.finish()?;

        let mut backbone = Vec::new();
        for section in &doc.sections {
            let mut r = Reader::new(doc, section);
            let stage = match section.name.as_str() {
                "conv" => StageSpec::Conv(ConvBlockSpec {
                    k: r.get("k")?,
                    s: r.or("s", 1)?,
                    c_out: r.get("c_out")?,
                    activation: Activation::parse(&r.or("activation", "relu6".to_string())?)?,
                }),
                "uib" => StageSpec::Uib(UibStackSpec {
                    k1: r.get("k1")?,
                    k2: r.get("k2")?,
                    s: r.or("s", 1)?,
                    r: r.get("r")?,
                    c_out: r.get("c_out")?,
                    repeat: r.or("repeat", 1)?,
                }),
                "c2f" => StageSpec::C2f(C2fSpec {
                    c_out: r.get("c_out")?,
                    n: r.or("n", 1)?,
                    shortcut: r.or("shortcut", true)?,
                }),
                "sppf" => StageSpec::Sppf(SppfSpec { k: r.or("k", 5)? }),
                _ => continue,
            };
            r.finish()?;
            backbone.push(stage);
        }

        let (neck_channels, neck_depth) = match doc.unique("neck")? {
            Some(s) => {
                let mut r = Reader::new(doc, s);
                let ch: Vec<usize> = r
                    .list("channels")?
                    .ok_or_else(|| Error::config("[neck] is missing `channels`"))?;
                let depth = r.or("depth", 1)?;
                r.finish()?;
                let ch: [usize; 3] = ch.try_into().map_err(|v: Vec<usize>| {
                    Error::config(format!(
                        "[neck] channels needs one value per head stride (3), got {}",
                        v.len()
                    ))
                })?;
                (ch, depth)
            }
            None => ([64, 128, 256], 1),
        };
        let (box_channels, cls_channels) = match doc.unique("head")? {
            Some(s) => {
                let mut r = Reader::new(doc, s);
                let b = r.or("box_channels", 64)?;
                let c = r.or("cls_channels", 64)?;
                r.finish()?;
                (b, c)
            }
            None => (64, 64),
        };
        let cfg = ModelConfig {
            name,
            input_channels,
            num_classes,
            width_scale,
            backbone,
            neck_channels,
            neck_depth,
            box_channels,
            cls_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_document(&Document::parse(text, "<config>")?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if ![1, 3].contains(&self.input_channels) {
            return Err(Error::config(format!(
                "input_channels must be 1 (thermal) or 3, got {}",
                self.input_channels
            )));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(Error::config("width_scale must be positive"));
        }
        if self.backbone.is_empty() {
            return Err(Error::config("backbone has no stages"));
        }
        for stage in &self.backbone {
            match stage {
                StageSpec::Conv(c) => {
                    if c.k % 2 == 0 {
                        return Err(Error::config(format!("conv kernel size {} must be odd", c.k)));
                    }
                    if c.s == 0 || c.c_out == 0 {
                        return Err(Error::config("conv stride and c_out must be positive"));
                    }
                }
                StageSpec::Uib(u) => {
                    if u.repeat == 0 {
                        return Err(Error::config("uib repeat must be at least 1"));
                    }
                    check_uib_params(u.k1, u.k2, u.s, u.r)?;
                }
                StageSpec::C2f(c) => {
                    if c.c_out < 2 {
                        return Err(Error::config("c2f c_out must be at least 2"));
                    }
                }
                StageSpec::Sppf(s) => {
                    if s.k % 2 == 0 {
                        return Err(Error::config("sppf kernel must be odd"));
                    }
                }
            }
        }
        if self.neck_channels.contains(&0) || self.box_channels == 0 || self.cls_channels == 0 {
            return Err(Error::config("neck and head channel counts must be positive"));
        }
        Ok(())
    }

    /// Renders the config in the file grammar; `parse(render())` is lossless.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "name = {}", self.name);
        let _ = writeln!(out, "input_channels = {}", self.input_channels);
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        let _ = writeln!(out, "width_scale = {}", self.width_scale);
        for stage in &self.backbone {
            out.push('\n');
            match stage {
                StageSpec::Conv(c) => {
                    let _ = writeln!(
                        out,
                        "[conv]\nk = {}\ns = {}\nc_out = {}\nactivation = {}",
                        c.k,
                        c.s,
                        c.c_out,
                        c.activation.name()
                    );
                }
                StageSpec::Uib(u) => {
                    let _ = writeln!(
                        out,
                        "[uib]\nk1 = {}\nk2 = {}\ns = {}\nr = {}\nc_out = {}\nrepeat = {}",
                        u.k1, u.k2, u.s, u.r, u.c_out, u.repeat
                    );
                }
                StageSpec::C2f(c) => {
                    let _ = writeln!(
                        out,
                        "[c2f]\nc_out = {}\nn = {}\nshortcut = {}",
                        c.c_out, c.n, c.shortcut
                    );
                }
                StageSpec::Sppf(s) => {
                    let _ = writeln!(out, "[sppf]\nk = {}", s.k);
                }
            }
        }
        let [a, b, c] = self.neck_channels;
        let _ = writeln!(out, "\n[neck]\nchannels = {a}, {b}, {c}\ndepth = {}", self.neck_depth);
        let _ = writeln!(
            out,
            "\n[head]\nbox_channels = {}\ncls_channels = {}",
            self.box_channels, self.cls_channels
        );
        out
    }
}

/// Configuration files shipped with the crate, addressable by file name.
pub const BUILTIN_CONFIGS: &[(&str, &str)] = &[
    ("msyolo-small.cfg", include_str!("../../configs/msyolo-small.cfg")),
    ("msyolo-full.cfg", include_str!("../../configs/msyolo-full.cfg")),
    ("yolov8-small.cfg", include_str!("../../configs/yolov8-small.cfg")),
    ("yolov8-full.cfg", include_str!("../../configs/yolov8-full.cfg")),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN_CONFIGS
        .iter()
        .find(|(n, _)| *n == name || n.trim_end_matches(".cfg") == name)
        .map(|(_, text)| *text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_round_trip() {
        for (name, text) in BUILTIN_CONFIGS {
            let cfg = ModelConfig::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            let again = ModelConfig::parse(&cfg.render()).unwrap();
            assert_eq!(cfg, again, "{name}");
        }
    }

    #[test]
    fn rejects_bad_uib_kernel() {
        let text = "[model]\nnum_classes = 2\n[conv]\nk = 3\ns = 2\nc_out = 8\n[uib]\nk1 = 4\nk2 = 0\nr = 2\nc_out = 8\n";
        let err = ModelConfig::parse(text).unwrap_err();
        assert!(err.to_string().contains("k1 = 4"), "{err}");
    }

    #[test]
    fn uib_spec_rules() {
        let spec = UibSpec { k1: 0, k2: 0, s: 1, r: 2.0, c_in: 8, c_out: 8 };
        spec.validate().unwrap();
        assert_eq!(spec.expanded(), 16);
        assert!(spec.has_residual());
        assert!(!UibSpec { s: 2, k1: 3, ..spec.clone() }.has_residual());
        assert!(UibSpec { s: 2, ..spec.clone() }.validate().is_err());
        assert!(UibSpec { r: 0.01, ..spec }.validate().is_err());
    }
}
