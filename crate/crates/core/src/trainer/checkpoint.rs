//! `.sckp` checkpoint files.
//!
//! Layout: the 8-byte magic `SCKP0001`, a little-endian u64 header length,
//! a UTF-8 JSON header, then the tensor payload as contiguous little-endian
//! f64 values. The header lists each tensor as
//! `{name, shape, dtype, offset, length}` with byte offsets relative to the
//! start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::OptimizerState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::tensor::{ParamSet, Tensor};
use crate::nn::Model;

pub const MAGIC: &[u8; 8] = b"SCKP0001";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

/// Where the derived random streams resume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_epoch: usize,
}

impl RngState {
    pub fn new(seed: u64, next_epoch: usize) -> Self {
        Self { algorithm: "xoshiro256**".into(), seed, next_epoch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_acc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestRecord>,
    pub rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: usize,
    config: TrainConfig,
    rng: RngState,
    best: Option<BestRecord>,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups: [(&str, &ParamSet); 3] =
            [(PARAM, &self.model.params), (MOMENT1, &self.optimizer.m), (MOMENT2, &self.optimizer.v)];
        let mut records = Vec::new();
        let mut payload = Vec::new();
        for (prefix, set) in groups {
            for (name, t) in set {
                let offset = payload.len() as u64;
                for v in &t.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                records.push(TensorRecord {
                    name: format!("{prefix}{name}"),
                    shape: t.shape.clone(),
                    dtype: "f64".into(),
                    offset,
                    length: payload.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            rng: self.rng.clone(),
            best: self.best,
            adam_steps: self.optimizer.steps.clone(),
            tensors: records,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: String| Error::Checkpoint(why);
        if bytes.len() < 16 {
            return Err(corrupt("file too short for header".into()));
        }
        if &bytes[..4] != b"SCKP" {
            return Err(corrupt("bad magic".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(format!("unsupported format version {:?}", String::from_utf8_lossy(&bytes[4..8]))));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = 16u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file size")))?
            as usize;
        let header: Header =
            serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &bytes[payload_start..];
        let mut sets: [ParamSet; 3] = Default::default();
        for rec in &header.tensors {
            if rec.dtype != "f64" {
                return Err(corrupt(format!("{}: unsupported dtype {}", rec.name, rec.dtype)));
            }
            let count: usize = rec.shape.iter().product();
            if rec.length != 8 * count as u64 {
                return Err(corrupt(format!("{}: length {} does not match shape", rec.name, rec.length)));
            }
            let end = rec
                .offset
                .checked_add(rec.length)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| corrupt(format!("{}: data runs past end of file", rec.name)))?;
            let data = payload[rec.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(rec.shape.clone(), data)?;
            let (slot, name) = if let Some(n) = rec.name.strip_prefix(PARAM) {
                (0, n)
            } else if let Some(n) = rec.name.strip_prefix(MOMENT1) {
                (1, n)
            } else if let Some(n) = rec.name.strip_prefix(MOMENT2) {
                (2, n)
            } else {
                return Err(corrupt(format!("unknown tensor {}", rec.name)));
            };
            sets[slot].insert(name.to_string(), tensor);
        }
        let [params, m, v] = sets;
        let model = Model::from_params(header.config.model.clone(), params)?;
        for moments in [&m, &v] {
            if moments.len() != model.params.len()
                || model.params.iter().any(|(k, p)| moments.get(k).map(|t| &t.shape) != Some(&p.shape))
            {
                return Err(corrupt("optimizer moments do not match parameters".into()));
            }
        }
        Ok(Self {
            config: header.config,
            model,
            optimizer: OptimizerState { m, v, steps: header.adam_steps },
            epoch: header.epoch,
            best: header.best,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            model: ModelConfig { conv_channels: vec![2], repr_dim: 5, proj_dim: 3, num_classes: 4, in_channels: 3 },
            ..TrainConfig::default()
        };
        let model = Model::init(&config.model, 3).unwrap();
        let mut optimizer = OptimizerState::new(&model.params);
        for (i, t) in optimizer.m.values_mut().enumerate() {
            t.data.iter_mut().for_each(|v| *v = 0.1 * i as f64 - 1e-300);
        }
        optimizer.steps.values_mut().for_each(|s| *s = 17);
        Checkpoint {
            config,
            model,
            optimizer,
            epoch: 5,
            best: Some(BestRecord { epoch: 4, val_acc: 0.75, val_loss: 0.1 + 0.2 }),
            rng: RngState::new(42, 5),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"SCKP0001");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.config, c.config);
        assert_eq!(back.best, c.best);
        assert_eq!((back.epoch, back.rng.seed, back.rng.next_epoch), (5, 42, 5));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 15, 40, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
        }
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(b"0002");
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge).is_err());
    }
}
