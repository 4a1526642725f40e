//! Lightweight infrared object detection: a UIB backbone with a YOLOv8-style
//! neck and three decoupled heads, trained with SlideLoss sample weighting.
//!
//! The crate is self-contained: tensors and reverse-mode autodiff, model
//! construction and checkpointing, the detection loss, mAP evaluation,
//! analytic FLOP counting, dataset loading and a deterministic trainer.

pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/uib.md")]
    mod uib {}
    #[doc = include_str!("../../../book/src/slideloss.md")]
    mod slideloss {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/flops.md")]
    mod flops {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
