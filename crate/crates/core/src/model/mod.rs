//! Network description, construction, inference and post-processing.

mod blocks;
mod checkpoint;
mod decode;
mod graph;
mod layers;
mod params;
mod spec;
mod uib;

pub use blocks::{Bottleneck, C2f, Sppf};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use decode::{decode_box, decode_predictions, nms, DecodedGrid, Detection};
pub use graph::{build_graph, next_multiple_of_32, Head, ModelGraph, Neck, Stage, CLASS_PRIOR_BIAS};
pub use layers::{BatchNorm, Conv, ConvBlock, Describer, LayerDesc, LayerKind, Shape, BN_EPS, BN_MOMENTUM};
pub use params::{apply_bn_updates, BnUpdate, ParamBuilder, ParamEntry, ParamId, ParamKind, ParamStore, Session};
pub use spec::{
    builtin, Activation, C2fSpec, ConvBlockSpec, ModelConfig, SppfSpec, StageSpec, UibSpec, UibStackSpec,
    BUILTIN_CONFIGS, HEAD_STRIDES, MODEL_SECTIONS,
};
pub use uib::{build_uib, UibBlock};

use crate::error::Result;
use crate::tensor::Tensor;

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: ModelGraph,
    pub params: ParamStore,
}

/// Builds the network described by `config` with weights drawn from `seed`.
pub fn build_msyolo(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut pb = ParamBuilder::new(seed);
    let graph = build_graph(config, &mut pb)?;
    Ok(Model {
        config: config.clone(),
        graph,
        params: pb.store,
    })
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Inference-mode forward pass over a batch `(N, C, H, W)`.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let mut s = Session::new(&self.params, false);
        let x = s.tape.constant(images.clone());
        let outs = self.graph.forward(&mut s, x)?;
        Ok(outs.iter().map(|&v| s.tape.value(v).clone()).collect())
    }

    /// Layer table and head output shapes for an input of `h x w` pixels.
    pub fn describe(&self, h: usize, w: usize) -> Result<(Vec<LayerDesc>, [Shape; 3])> {
        self.graph.describe([self.config.input_channels, h, w])
    }

    /// Sets every parameter, buffers included, to zero.
    pub fn zero_all(&mut self) {
        for e in self.params.entries_mut() {
            e.tensor.data_mut().fill(0.0);
        }
    }
}
