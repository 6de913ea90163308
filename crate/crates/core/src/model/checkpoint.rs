//! Checkpoint file: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header listing every tensor, then each tensor's `f64` values as
//! little-endian bytes in header order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OvtError, Result};
use crate::linalg::Matrix;
use crate::model::encoder::{Architecture, EncoderConfig, VisualBase};
use crate::model::lora::LoraAdapter;
use crate::model::text::TextEncoder;
use crate::model::viformer::{VIFormerParams, VIFORMER_TENSORS};
use crate::model::{ModelState, Trainable};

pub const MAGIC: &[u8; 8] = b"OVTCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub lora_rank: usize,
    pub alpha: f64,
    pub train_temperature: bool,
    pub tensors: Vec<TensorEntry>,
}

fn entries(state: &ModelState) -> Vec<(TensorEntry, Vec<f64>)> {
    let mut out = Vec::new();
    for (name, m) in state.frozen_tensors() {
        out.push((
            TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                trainable: false,
            },
            m.data().to_vec(),
        ));
    }
    let t = &state.trainable;
    let mut shapes: Vec<(usize, usize)> = Vec::new();
    for a in &t.adapters {
        shapes.push(a.a.shape());
        shapes.push(a.b.shape());
    }
    shapes.extend(t.viformer.tensors().iter().map(|m| m.shape()));
    shapes.push((1, 1));
    for ((name, data), (rows, cols)) in t.named_slices().into_iter().zip(shapes) {
        out.push((
            TensorEntry {
                name,
                rows,
                cols,
                trainable: true,
            },
            data.to_vec(),
        ));
    }
    out
}

pub fn to_bytes(state: &ModelState, seed: u64) -> Result<Vec<u8>> {
    let tensors = entries(state);
    let header = CheckpointHeader {
        seed,
        encoder: state.visual.config(),
        lora_rank: state.lora_rank(),
        alpha: state.alpha,
        train_temperature: state.train_temperature,
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|(_, d)| d.len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(state: &ModelState, seed: u64, path: &Path) -> Result<()> {
    let bytes = to_bytes(state, seed)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelState, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelState, CheckpointHeader)> {
    let bad = |m: &str| OvtError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length past end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..json_end])?;

    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    let mut off = json_end;
    for e in &header.tensors {
        let n = e.rows * e.cols;
        let end = off + n * 8;
        if end > bytes.len() {
            return Err(bad(&format!("tensor {} truncated", e.name)));
        }
        let data: Vec<f64> = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(e.name.clone(), Matrix::from_vec(e.rows, e.cols, data)?);
        off = end;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| bad(&format!("missing tensor {name}")))
    };

    let visual = match header.encoder.architecture {
        Architecture::Linear => VisualBase::Linear { w: take("visual.w")? },
        Architecture::SingleAttentionBlock => VisualBase::Attention {
            wq: take("visual.wq")?,
            wk: take("visual.wk")?,
            wv: take("visual.wv")?,
            wo: take("visual.wo")?,
            proj: take("visual.proj")?,
            token_count: header.encoder.token_count,
        },
    };
    let text = TextEncoder {
        weight: take("text.w")?,
    };
    let mut adapters = Vec::new();
    for target in visual.adapter_targets() {
        let a = take(&format!("{target}.lora_a"))?;
        let b = take(&format!("{target}.lora_b"))?;
        adapters.push(LoraAdapter::from_parts(target, a, b)?);
    }
    let mut vif: Vec<Matrix> = Vec::new();
    for name in VIFORMER_TENSORS {
        vif.push(take(&format!("viformer.{name}"))?);
    }
    let mut it = vif.into_iter();
    let mut next = || it.next().expect("ten tensors");
    let viformer = VIFormerParams {
        wq: next(),
        wk: next(),
        wv: next(),
        wo: next(),
        w1: next(),
        w2: next(),
        ln1_gain: next(),
        ln1_bias: next(),
        ln2_gain: next(),
        ln2_bias: next(),
    };
    let log_tau = take("log_tau")?.data()[0];
    let state = ModelState {
        visual,
        text,
        trainable: Trainable {
            adapters,
            viformer,
            log_tau,
        },
        alpha: header.alpha,
        train_temperature: header.train_temperature,
    };
    state.validate()?;
    Ok((state, header))
}
