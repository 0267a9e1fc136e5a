//! Binary checkpoint format.
//!
//! ```text
//! "GHVT"                      4-byte ASCII magic
//! version                     u8
//! config block                u32 LE byte length + UTF-8 `key=value` lines
//! tensor count                u32 LE
//! per tensor:                 u16 LE name length, UTF-8 name, u8 rank,
//!                             u32 LE extents, f32 LE payload
//! metrics block               u32 LE byte length + UTF-8 records joined by
//!                             ',', each `epoch:train_loss:test_accuracy`
//! ```
//!
//! Model parameters come first, then Adam moments named `adam.m/<param>`
//! and `adam.v/<param>`. Epoch, seed and optimizer scalars travel in the
//! config block under `state.*` keys.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::adam::{AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GHVT";
pub const VERSION: u8 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

impl EpochMetrics {
    fn encode(&self) -> String {
        format!("{}:{}:{}", self.epoch, self.train_loss, self.test_accuracy)
    }

    fn decode(record: &str) -> Option<Self> {
        let mut parts = record.split(':');
        let m = EpochMetrics {
            epoch: parts.next()?.parse().ok()?,
            train_loss: parts.next()?.parse().ok()?,
            test_accuracy: parts.next()?.parse().ok()?,
        };
        parts.next().is_none().then_some(m)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Effective run configuration, model keys first.
    pub config: IndexMap<String, String>,
    pub params: ParamSet<f32>,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_entries(|k| self.config.get(k).map(String::as_str))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.push(VERSION);

        let mut block = String::new();
        for (k, v) in &self.config {
            block.push_str(&format!("{k}={v}\n"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.optimizer.config;
        for (k, v) in [
            ("state.epoch", self.epoch.to_string()),
            ("state.seed", self.seed.to_string()),
            ("state.adam_step", self.optimizer.step.to_string()),
            ("state.adam_lr", lr.to_string()),
            ("state.adam_beta1", beta1.to_string()),
            ("state.adam_beta2", beta2.to_string()),
            ("state.adam_eps", eps.to_string()),
        ] {
            block.push_str(&format!("{k}={v}\n"));
        }
        write_block(&mut out, &block);

        let mut tensors: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push((name.to_string(), t.dims().to_vec(), t.data()));
        }
        for (prefix, map) in [(FIRST_MOMENT, &self.optimizer.first), (SECOND_MOMENT, &self.optimizer.second)] {
            for (name, values) in map {
                let dims = self.params.get(name).map(|t| t.dims().to_vec()).unwrap_or_else(|_| vec![values.len()]);
                tensors.push((format!("{prefix}{name}"), dims, values));
            }
        }
        out.extend((tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            out.extend((name.len() as u16).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(dims.len() as u8);
            for d in dims {
                out.extend((d as u32).to_le_bytes());
            }
            for v in data {
                out.extend(v.to_le_bytes());
            }
        }

        let records: Vec<String> = self.history.iter().map(EpochMetrics::encode).collect();
        write_block(&mut out, &records.join(","));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }

        let block_at = r.pos;
        let block = r.block()?;
        let mut config = IndexMap::new();
        let mut state = IndexMap::new();
        for line in block.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| r.error_at(block_at, format!("config line `{line}`")))?;
            let target = if k.starts_with("state.") { &mut state } else { &mut config };
            target.insert(k.to_string(), v.to_string());
        }
        let state_value = |key: &str| -> Result<&String> {
            state.get(key).ok_or_else(|| r.error_at(block_at, format!("missing `{key}`")))
        };
        macro_rules! parse_state {
            ($key:expr) => {
                state_value($key)?
                    .parse()
                    .map_err(|_| r.error_at(block_at, format!("unparsable `{}`", $key)))?
            };
        }
        let epoch: usize = parse_state!("state.epoch");
        let seed: u64 = parse_state!("state.seed");
        let step: u64 = parse_state!("state.adam_step");
        let adam = AdamConfig {
            lr: parse_state!("state.adam_lr"),
            beta1: parse_state!("state.adam_beta1"),
            beta2: parse_state!("state.adam_beta2"),
            eps: parse_state!("state.adam_eps"),
        };

        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error_at(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let payload = r.take(numel * 4)?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(param) = name.strip_prefix(FIRST_MOMENT) {
                first.insert(param.to_string(), data);
            } else if let Some(param) = name.strip_prefix(SECOND_MOMENT) {
                second.insert(param.to_string(), data);
            } else {
                let t = Tensor::new(dims, data).map_err(|e| r.error_at(name_at, format!("tensor `{name}`: {e}")))?;
                params.insert(name, t);
            }
        }

        let metrics_at = r.pos;
        let records = r.block()?;
        let history = records
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| EpochMetrics::decode(s).ok_or_else(|| r.error_at(metrics_at, format!("metric record `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer: OptimizerState {
                config: adam,
                step,
                first,
                second,
            },
            epoch,
            seed,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn write_block(out: &mut Vec<u8>, text: &str) {
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(text.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(self.pos, format!("truncated: need {n} more bytes"))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn block(&mut self) -> Result<&'a str> {
        let at = self.pos;
        let len = self.u32()? as usize;
        std::str::from_utf8(self.take(len)?).map_err(|_| self.error_at(at, "block is not UTF-8"))
    }
}
