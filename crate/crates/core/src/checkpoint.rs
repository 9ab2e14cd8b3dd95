//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64`s.
//!
//! Tensors are named by parameter path; optimizer moments use the prefixes
//! `adam.m/` and `adam.v/`. Offsets in the header are byte offsets into the
//! blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRDCKPT1";
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub step: usize,
    pub adam_t: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub config: TrainConfig,
    pub model: Model<F>,
    pub optimizer: Adam<F>,
    pub step: usize,
}

fn push_tensor<F: Scalar>(
    name: String,
    t: &Tensor<F>,
    entries: &mut Vec<TensorEntry>,
    blob: &mut Vec<u8>,
) {
    entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset: blob.len() });
    for x in t.data() {
        blob.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

pub fn encode_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let store = &ckpt.model.store;
    for (name, t) in store.iter() {
        push_tensor(name.to_string(), t, &mut entries, &mut blob);
    }
    for (prefix, moments) in [(MOMENT_M, &ckpt.optimizer.m), (MOMENT_V, &ckpt.optimizer.v)] {
        for ((name, _), t) in store.iter().zip(moments) {
            push_tensor(format!("{prefix}{name}"), t, &mut entries, &mut blob);
        }
    }
    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        model: ckpt.model.config,
        step: ckpt.step,
        adam_t: ckpt.optimizer.t,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Splits a checkpoint file into its header and blob section.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    Ok((header, &bytes[end..]))
}

fn read_tensor<F: Scalar>(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor<F>> {
    let n: usize = entry.shape.iter().product();
    let end = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(entry.offset))
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| Error::Format(format!("tensor {} runs past end of file", entry.name)))?;
    let data = blob[entry.offset..end]
        .chunks_exact(8)
        .map(|c| F::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let (header, blob) = read_header(bytes)?;
    let mut model = Model::<F>::new(header.model, header.config.seed)?;
    let mut params = Vec::new();
    let mut moments_m = Vec::new();
    let mut moments_v = Vec::new();
    for e in &header.tensors {
        let t = read_tensor::<F>(e, blob)?;
        if let Some(name) = e.name.strip_prefix(MOMENT_M) {
            moments_m.push((name, t));
        } else if let Some(name) = e.name.strip_prefix(MOMENT_V) {
            moments_v.push((name, t));
        } else {
            params.push((e.name.as_str(), t));
        }
    }
    model.store.load_from(params)?;
    let mut optimizer = Adam::new(&model.store, header.config.learning_rate);
    optimizer.t = header.adam_t;
    for (moments, target) in [(moments_m, &mut optimizer.m), (moments_v, &mut optimizer.v)] {
        let mut scratch = model.store.clone();
        scratch.load_from(moments)?;
        *target = scratch.ids().map(|id| scratch.value(id).clone()).collect();
    }
    Ok(Checkpoint { config: header.config, model, optimizer, step: header.step })
}

pub fn save_checkpoint<F: Scalar>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes =
        fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}
