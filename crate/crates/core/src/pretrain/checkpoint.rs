//! `LWMW` weight files: magic, `u16` version, `u32` JSON metadata length and
//! bytes, `u32` tensor count, then per tensor a `u16` name length, the name,
//! a `u8` rank, `u32` dims and little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EpochRecord, TrainConfig};
use crate::channel::{apply_scale, ChannelMatrix};
use crate::model::{forward_embed, EmbeddingOutput, LwmParameters, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, Tensor};

const MAGIC: [u8; 4] = *b"LWMW";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated: needed {needed} bytes at offset {offset}")]
    Truncated { needed: usize, offset: usize },
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint tensors: {0}")]
    Shape(String),
    #[error("checkpoint was built for {found:?}, expected {expected:?}")]
    ConfigConflict { expected: ModelConfig, found: ModelConfig },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trained model plus everything needed to resume or reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Factor applied to raw channels before patching.
    pub norm_scale: f64,
    /// Completed epochs.
    pub epoch: usize,
    pub params: LwmParameters,
    pub optimizer: Option<AdamState>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Normalizes a raw channel with the pre-training scale and embeds it.
    pub fn embed(&self, ch: &ChannelMatrix) -> crate::Result<EmbeddingOutput> {
        let scaled = apply_scale(std::slice::from_ref(ch), self.norm_scale);
        forward_embed(&scaled[0], &self.params)
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    norm_scale: f64,
    epoch: usize,
    history: Vec<EpochRecord>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    config: AdamConfig,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let meta = Meta {
        model: ck.model,
        train: ck.train.clone(),
        norm_scale: ck.norm_scale,
        epoch: ck.epoch,
        history: ck.history.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerMeta {
            step: o.step,
            config: o.config,
        }),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * ck.params.scalar_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let names = ck.params.names();
    let tensors = ck.params.tensors();
    let count = names.len() * if ck.optimizer.is_some() { 3 } else { 1 };
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        put_tensor(&mut out, name, t.dims(), t.data());
    }
    if let Some(opt) = &ck.optimizer {
        for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
            for ((name, t), m) in names.iter().zip(tensors).zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t.dims(), m);
            }
        }
    }
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                needed: n,
                offset: self.pos,
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor), CheckpointError> {
    let name_len = r.u16()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| CheckpointError::Shape("tensor name is not UTF-8".into()))?;
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CheckpointError::Shape(format!("tensor {name} dims overflow")))?;
    let data = r
        .take(n)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Shape(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(json_len)?)?;
    let count = r.u32()? as usize;
    let mut named = Vec::new();
    let mut moments = std::collections::HashMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if name.starts_with("adam.") {
            moments.insert(name, t);
        } else {
            named.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let params = LwmParameters::from_named(&meta.model, named).map_err(|e| CheckpointError::Shape(e.to_string()))?;
    let optimizer = match meta.optimizer {
        None if moments.is_empty() => None,
        None => {
            return Err(CheckpointError::Shape(
                "optimizer moments without optimizer state".into(),
            ))
        }
        Some(o) => {
            let mut take = |prefix: &str| -> Result<Vec<Vec<f64>>, CheckpointError> {
                params
                    .names()
                    .iter()
                    .zip(params.tensors())
                    .map(|(n, p)| {
                        let key = format!("{prefix}{n}");
                        let t = moments
                            .remove(&key)
                            .ok_or_else(|| CheckpointError::Shape(format!("missing tensor {key}")))?;
                        if t.dims() != p.dims() {
                            return Err(CheckpointError::Shape(format!("tensor {key} has dims {:?}", t.dims())));
                        }
                        Ok(t.into_data())
                    })
                    .collect()
            };
            let m = take("adam.m.")?;
            let v = take("adam.v.")?;
            if let Some(extra) = moments.keys().next() {
                return Err(CheckpointError::Shape(format!("unexpected tensor {extra}")));
            }
            Some(AdamState {
                step: o.step,
                m,
                v,
                config: o.config,
            })
        }
    };
    Ok(Checkpoint {
        model: meta.model,
        train: meta.train,
        norm_scale: meta.norm_scale,
        epoch: meta.epoch,
        params,
        optimizer,
        history: meta.history,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    crate::channel::write_atomic(path, &encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads and checks that the stored architecture equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    let ck = load_checkpoint(path)?;
    if ck.model != *expected {
        return Err(CheckpointError::ConfigConflict {
            expected: *expected,
            found: ck.model,
        });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn sample(with_opt: bool) -> Checkpoint {
        let model = ModelConfig::micro();
        let mut params = LwmParameters::init(&model, &mut seed::rng(3)).unwrap();
        params.quantize_f32();
        let train = TrainConfig::for_model(&model);
        let optimizer = with_opt.then(|| {
            let mut o = AdamState::new(params.tensors(), train.adam(1e-4)).unwrap();
            o.step = 7;
            o.m[0] = vec![0.5; o.m[0].len()];
            o
        });
        Checkpoint {
            model,
            train,
            norm_scale: 12.345,
            epoch: 7,
            params,
            optimizer,
            history: vec![EpochRecord {
                epoch: 0,
                lr: 1e-4,
                train_loss: 0.5,
                train_nmse: 0.8,
                val_loss: 0.4,
                val_nmse: 0.9,
            }],
        }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        for with_opt in [false, true] {
            let ck = sample(with_opt);
            let bytes = encode_checkpoint(&ck).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.params, ck.params);
            assert_eq!(back.optimizer.is_some(), with_opt);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_typed_errors() {
        let bytes = encode_checkpoint(&sample(true)).unwrap();
        assert!(matches!(
            decode_checkpoint(b"NOPE\x01\x00"),
            Err(CheckpointError::BadMagic(_))
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            decode_checkpoint(&v),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut v = bytes.clone();
        v.push(0);
        assert!(matches!(decode_checkpoint(&v), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn config_conflict_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lwmw");
        save_checkpoint(&path, &sample(false)).unwrap();
        assert!(load_checkpoint_for(&path, &ModelConfig::micro()).is_ok());
        let other = ModelConfig {
            layers: 3,
            ..ModelConfig::micro()
        };
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(CheckpointError::ConfigConflict { .. })
        ));
    }
}
