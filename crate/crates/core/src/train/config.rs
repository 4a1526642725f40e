//! Experiment configuration: one file holds the model sections plus the
//! optional `[train]`, `[loss]`, `[data]` and `[eval]` sections.

use serde::{Deserialize, Serialize};

use crate::config::{Document, Reader};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{ModelConfig, MODEL_SECTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    Sgd { momentum: f64, nesterov: bool },
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step budget; when set it replaces `epochs`.
    pub steps: Option<usize>,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    /// Linear warmup length; `None` means three epochs.
    pub warmup_steps: Option<usize>,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Horizontal flip probability.
    pub fliplr: f64,
    /// Evaluate every this many epochs; 0 disables per-epoch evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            steps: None,
            lr0: 0.01,
            lrf: 0.01,
            warmup_steps: None,
            optimizer: OptimizerKind::Sgd {
                momentum: 0.9,
                nesterov: false,
            },
            weight_decay: 5e-4,
            grad_clip: 10.0,
            seed: 0,
            fliplr: 0.5,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub conf: f32,
    pub iou: f64,
    /// Detections kept per image after NMS.
    pub max_det: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf: 0.001,
            iou: 0.45,
            max_det: 300,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Square network input after letterboxing.
    pub imgsz: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { imgsz: 160 }
    }
}

/// Everything a run needs besides the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Initial `mu` and its EMA momentum.
    pub mu_init: f64,
    pub mu_momentum: f64,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

const RUN_SECTIONS: &[&str] = &["train", "loss", "data", "eval"];

impl ExperimentConfig {
    pub fn from_document(doc: &Document) -> Result<Self> {
        for s in &doc.sections {
            if !MODEL_SECTIONS.contains(&s.name.as_str()) && !RUN_SECTIONS.contains(&s.name.as_str()) {
                return Err(Error::config(format!(
                    "{}:{}: unknown section [{}]",
                    doc.path.display(),
                    s.line,
                    s.name
                )));
            }
        }
        let model = ModelConfig::from_document(doc)?;

        let mut train = TrainConfig::default();
        if let Some(s) = doc.unique("train")? {
            let mut r = Reader::new(doc, s);
            train.epochs = r.or("epochs", train.epochs)?;
            train.batch_size = r.or("batch_size", train.batch_size)?;
            train.steps = r.opt("steps")?;
            train.lr0 = r.or("lr0", train.lr0)?;
            train.lrf = r.or("lrf", train.lrf)?;
            train.warmup_steps = r.opt("warmup_steps")?;
            train.weight_decay = r.or("weight_decay", train.weight_decay)?;
            train.grad_clip = r.or("grad_clip", train.grad_clip)?;
            train.seed = r.or("seed", train.seed)?;
            train.fliplr = r.or("fliplr", train.fliplr)?;
            train.eval_every = r.or("eval_every", train.eval_every)?;
            let kind: String = r.or("optimizer", "sgd".to_string())?;
            train.optimizer = match kind.as_str() {
                "sgd" => OptimizerKind::Sgd {
                    momentum: r.or("momentum", 0.9)?,
                    nesterov: r.or("nesterov", false)?,
                },
                "adam" => OptimizerKind::Adam {
                    beta1: r.or("beta1", 0.9)?,
                    beta2: r.or("beta2", 0.999)?,
                    eps: r.or("eps", 1e-8)?,
                },
                other => {
                    return Err(Error::config(format!(
                        "[train] optimizer `{other}` is not one of sgd, adam"
                    )))
                }
            };
            r.finish()?;
        }

        let mut loss = LossConfig::default();
        let (mut mu_init, mut mu_momentum) = (0.5, 0.05);
        if let Some(s) = doc.unique("loss")? {
            let mut r = Reader::new(doc, s);
            loss.lambda_box = r.or("lambda_box", loss.lambda_box)?;
            loss.lambda_cls = r.or("lambda_cls", loss.lambda_cls)?;
            loss.use_slide = r.or("use_slide", loss.use_slide)?;
            mu_init = r.or("mu_init", mu_init)?;
            mu_momentum = r.or("mu_momentum", mu_momentum)?;
            r.finish()?;
        }

        let mut data = DataConfig::default();
        if let Some(s) = doc.unique("data")? {
            let mut r = Reader::new(doc, s);
            data.imgsz = r.or("imgsz", data.imgsz)?;
            r.finish()?;
        }

        let mut eval = EvalConfig::default();
        if let Some(s) = doc.unique("eval")? {
            let mut r = Reader::new(doc, s);
            eval.conf = r.or("conf", eval.conf)?;
            eval.iou = r.or("iou", eval.iou)?;
            eval.max_det = r.or("max_det", eval.max_det)?;
            eval.batch_size = r.or("batch_size", eval.batch_size)?;
            r.finish()?;
        }

        let cfg = ExperimentConfig {
            model,
            train,
            loss,
            mu_init,
            mu_momentum,
            data,
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_document(&Document::parse(text, "<config>")?)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |msg: String| Err(Error::config(msg));
        if t.batch_size == 0 {
            return bad("[train] batch_size must be at least 1".into());
        }
        if !(t.lr0 >= 0.0 && t.lr0.is_finite()) || !(0.0..=1.0).contains(&t.lrf) {
            return bad(format!("[train] lr0 = {} / lrf = {} out of range", t.lr0, t.lrf));
        }
        if !(t.grad_clip > 0.0) || !(t.weight_decay >= 0.0) || !(0.0..=1.0).contains(&t.fliplr) {
            return bad("[train] grad_clip must be > 0, weight_decay >= 0, fliplr in [0, 1]".into());
        }
        match t.optimizer {
            OptimizerKind::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                return bad(format!("[train] momentum {momentum} must be in [0, 1)"));
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                return bad("[train] Adam betas must be in [0, 1) and eps > 0".into());
            }
            _ => {}
        }
        if !(self.mu_momentum > 0.0 && self.mu_momentum <= 1.0) {
            return bad(format!("[loss] mu_momentum {} must be in (0, 1]", self.mu_momentum));
        }
        if !(self.loss.lambda_box >= 0.0 && self.loss.lambda_cls >= 0.0) {
            return bad("[loss] lambdas must be non-negative".into());
        }
        if self.data.imgsz == 0 || !self.data.imgsz.is_multiple_of(32) {
            return Err(Error::usage(format!(
                "[data] imgsz {} is not divisible by 32; try {}",
                self.data.imgsz,
                self.data.imgsz.div_ceil(32).max(1) * 32
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.conf) || !(0.0..=1.0).contains(&self.eval.iou) || self.eval.batch_size == 0
        {
            return bad("[eval] conf and iou must be in [0, 1], batch_size at least 1".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut out = self.model.render();
        out.push_str(&format!(
            "\n[train]\nepochs = {}\nbatch_size = {}\n",
            t.epochs, t.batch_size
        ));
        if let Some(s) = t.steps {
            out.push_str(&format!("steps = {s}\n"));
        }
        out.push_str(&format!("lr0 = {:?}\nlrf = {:?}\n", t.lr0, t.lrf));
        if let Some(w) = t.warmup_steps {
            out.push_str(&format!("warmup_steps = {w}\n"));
        }
        match t.optimizer {
            OptimizerKind::Sgd { momentum, nesterov } => {
                out.push_str(&format!("optimizer = sgd\nmomentum = {momentum:?}\nnesterov = {nesterov}\n"))
            }
            OptimizerKind::Adam { beta1, beta2, eps } => out.push_str(&format!(
                "optimizer = adam\nbeta1 = {beta1:?}\nbeta2 = {beta2:?}\neps = {eps:?}\n"
            )),
        }
        out.push_str(&format!(
            "weight_decay = {:?}\ngrad_clip = {:?}\nseed = {}\nfliplr = {:?}\neval_every = {}\n",
            t.weight_decay, t.grad_clip, t.seed, t.fliplr, t.eval_every
        ));
        out.push_str(&format!(
            "\n[loss]\nlambda_box = {:?}\nlambda_cls = {:?}\nuse_slide = {}\nmu_init = {:?}\nmu_momentum = {:?}\n",
            self.loss.lambda_box, self.loss.lambda_cls, self.loss.use_slide, self.mu_init, self.mu_momentum
        ));
        out.push_str(&format!("\n[data]\nimgsz = {}\n", self.data.imgsz));
        out.push_str(&format!(
            "\n[eval]\nconf = {:?}\niou = {:?}\nmax_det = {}\nbatch_size = {}\n",
            self.eval.conf, self.eval.iou, self.eval.max_det, self.eval.batch_size
        ));
        out
    }
}
