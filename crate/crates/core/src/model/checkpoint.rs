//! Checkpoint container.
//!
//! Layout: the 8-byte magic `MSYCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f32` values at the
//! byte offsets listed in the header (relative to the end of the header).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::SlideState;
use crate::tensor::Tensor;

use super::params::ParamKind;
use super::spec::ModelConfig;
use super::{build_msyolo, Model};

const MAGIC: &[u8; 8] = b"MSYCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    kind: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: String,
    slide: SlideState,
    step: u64,
    tensors: Vec<TensorRecord>,
}

/// A model plus the training state needed to resume it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub slide: SlideState,
    /// Optimizer steps taken before the checkpoint was written.
    pub step: u64,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = ckpt
        .model
        .params
        .entries()
        .iter()
        .map(|e| {
            let rec = TensorRecord {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: "f32".into(),
                kind: match e.kind {
                    ParamKind::Weight => "weight".into(),
                    ParamKind::Buffer => "buffer".into(),
                },
                offset,
            };
            offset += 4 * e.tensor.len() as u64;
            rec
        })
        .collect();
    let header = Header {
        format_version: 1,
        config: ckpt.model.config.render(),
        slide: ckpt.slide.clone(),
        step: ckpt.step,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in ckpt.model.params.entries() {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::validation(format!("checkpoint: {}", msg.into()))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing MSYCKPT1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format_version != 1 {
        return Err(corrupt(format!("unsupported format version {}", header.format_version)));
    }
    let config = ModelConfig::parse(&header.config)?;
    let mut model = build_msyolo(&config, 0)?;
    let body = &bytes[body_start..];
    let entries = model.params.entries_mut();
    if entries.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "{} tensors in file, model has {}",
            header.tensors.len(),
            entries.len()
        )));
    }
    for (e, rec) in entries.iter_mut().zip(&header.tensors) {
        if e.name != rec.name || e.tensor.shape() != rec.shape.as_slice() || rec.dtype != "f32" {
            return Err(corrupt(format!(
                "tensor `{}` {:?} {} does not match model tensor `{}` {:?}",
                rec.name,
                rec.shape,
                rec.dtype,
                e.name,
                e.tensor.shape()
            )));
        }
        let start = rec.offset as usize;
        let end = start + 4 * e.tensor.len();
        let raw = body
            .get(start..end)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past end of file", rec.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        e.tensor = Tensor::new(rec.shape.clone(), data)?;
    }
    Ok(Checkpoint {
        model,
        slide: header.slide,
        step: header.step,
    })
}

/// Writes atomically: a temporary sibling file renamed into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    crate::io::write_atomic(path, &write_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
