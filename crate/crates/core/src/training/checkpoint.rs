//! Binary checkpoint: `GPASLAB1`, a little-endian u32 header length, a JSON
//! header, then every parameter, Adam first moment and second moment as
//! little-endian f64 in store order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Precision, TrainConfig, TrainState};
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};
use crate::schemes::{ModelConfig, SchemeConfig, TransformerModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPASLAB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Data-sampler position: batches are a pure function of (seed, step).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub params: Vec<ParamMeta>,
    pub step: usize,
    pub rng: RngState,
    pub adam_step: u64,
    pub gate_alphas: Vec<f64>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Float> TrainState<T> {
    pub fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let header = CheckpointHeader {
            model: self.model.model.clone(),
            scheme: self.model.scheme.clone(),
            train: cfg.clone(),
            precision: if T::NAME == "f32" { Precision::F32 } else { Precision::F64 },
            params: self
                .model
                .params
                .entries()
                .iter()
                .map(|e| ParamMeta {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                })
                .collect(),
            step: self.step,
            rng: RngState {
                seed: self.data_seed,
                step: self.step,
            },
            adam_step: self.adam.step,
            gate_alphas: self.model.gate_alphas(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 24 * self.model.params.numel());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&u32::try_from(json.len()).map_err(|_| ck("header too large"))?.to_le_bytes());
        buf.extend_from_slice(&json);
        let tensors = self
            .model
            .params
            .entries()
            .iter()
            .map(|e| &e.value)
            .chain(&self.adam.m)
            .chain(&self.adam.v);
        for t in tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Restores a state saved by [`TrainState::save`], returning the header
    /// alongside it.
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let (header, mut body) = split_header(&bytes)?;

        let mut model = TransformerModel::<T>::new(header.model.clone(), header.scheme.clone(), header.train.seed)?;
        let n = model.params.len();
        if header.params.len() != n {
            return Err(ck(format!("{} tensors in file, model has {n}", header.params.len())));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let count: usize = shape.iter().product();
            if body.len() < count * 8 {
                return Err(ck("truncated tensor data"));
            }
            let (head, rest) = body.split_at(count * 8);
            body = rest;
            let data = head
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        for (i, meta) in header.params.iter().enumerate() {
            let entry = &model.params.entries()[i];
            if entry.name != meta.name || entry.value.shape() != meta.shape.as_slice() {
                return Err(ck(format!(
                    "tensor {i} is {} {:?}, model expects {} {:?}",
                    meta.name,
                    meta.shape,
                    entry.name,
                    entry.value.shape()
                )));
            }
            *model.params.get_mut(i) = take(&meta.shape)?;
        }
        let mut adam = AdamState::new(&model.params);
        for i in 0..n {
            adam.m[i] = take(&header.params[i].shape)?;
        }
        for i in 0..n {
            adam.v[i] = take(&header.params[i].shape)?;
        }
        if !body.is_empty() {
            return Err(ck("trailing bytes after tensor data"));
        }
        adam.step = header.adam_step;
        let state = TrainState {
            model,
            adam,
            step: header.step,
            data_seed: header.rng.seed,
        };
        Ok((state, header))
    }
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(ck(format!(
            "version mismatch: expected magic GPASLAB1, found {found:?}"
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = 12 + len;
    if bytes.len() < end {
        return Err(ck("truncated header"));
    }
    let header = serde_json::from_slice(&bytes[12..end]).map_err(|e| ck(format!("bad header: {e}")))?;
    Ok((header, &bytes[end..]))
}

/// Reads only the header, e.g. to pick the precision before loading.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}
