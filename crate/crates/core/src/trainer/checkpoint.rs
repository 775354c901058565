//! Binary checkpoints.
//!
//! Layout: the magic line `ICODECKPT1\n`, a one-line JSON header terminated
//! by `\n`, the little-endian `f32` arrays in header order, and finally the
//! FNV-1a 64-bit hash of every preceding byte (little-endian).

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use super::pretrain::Trainer;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8] = b"ICODECKPT1\n";

/// Prefixes of the optimizer moment entries.
pub const ADAM_M: &str = "adam.m/";
pub const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dtype: String,
    pub step: u64,
    pub adam_step: u64,
    pub config: TrainConfig,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    /// One array per header entry.
    pub data: Vec<Vec<f32>>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    /// Parameters, optimizer moments, step and config of a trainer.
    pub fn capture(trainer: &Trainer) -> Self {
        let store = &trainer.model.store;
        let mut named: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for (_, p) in store.iter() {
            named.push((p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data().to_vec()));
        }
        for (prefix, moments) in [(ADAM_M, &trainer.optimizer.m), (ADAM_V, &trainer.optimizer.v)] {
            for ((_, p), m) in store.iter().zip(moments) {
                named.push((format!("{prefix}{}", p.name), p.tensor.shape().to_vec(), m.clone()));
            }
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut data = Vec::with_capacity(named.len());
        for (name, shape, values) in named {
            let bytes = 4 * values.len() as u64;
            entries.push(Entry {
                name,
                shape,
                offset,
                bytes,
            });
            offset += bytes;
            data.push(values);
        }
        Self {
            header: Header {
                dtype: "f32".into(),
                step: trainer.step,
                adam_step: trainer.optimizer.step,
                config: trainer.config.clone(),
                entries,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&self.header)?);
        out.push(b'\n');
        for values in &self.data {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return ckpt_err("bad magic: not a checkpoint file");
        }
        if bytes.len() < MAGIC.len() + 8 {
            return ckpt_err("checksum mismatch: file truncated");
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return ckpt_err("checksum mismatch: file truncated or corrupted");
        }
        let rest = &body[MAGIC.len()..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return ckpt_err("header is not newline-terminated");
        };
        let header: Header = serde_json::from_slice(&rest[..nl])?;
        if header.dtype != "f32" {
            return ckpt_err(format!("unsupported dtype {}", header.dtype));
        }
        let payload = &rest[nl + 1..];
        let mut data = Vec::with_capacity(header.entries.len());
        let mut expected_offset = 0;
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            if e.bytes != 4 * n as u64 || e.offset != expected_offset {
                return ckpt_err(format!("entry `{}` has an inconsistent offset or size", e.name));
            }
            let end = (e.offset + e.bytes) as usize;
            if end > payload.len() {
                return ckpt_err(format!("entry `{}` runs past the end of the data", e.name));
            }
            data.push(
                payload[e.offset as usize..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            expected_offset += e.bytes;
        }
        if expected_offset as usize != payload.len() {
            return ckpt_err(format!("{} trailing data bytes", payload.len() - expected_offset as usize));
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn entry(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.header
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| (self.header.entries[i].shape.as_slice(), self.data[i].as_slice()))
    }

    fn fetch(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let Some((found, values)) = self.entry(name) else {
            return ckpt_err(format!("entry `{name}` is missing"));
        };
        if found != shape {
            return Err(Error::CheckpointShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(values)
    }

    /// Copies the stored parameters into `model`, checking every name and
    /// shape.
    pub fn restore_model(&self, model: &mut Model<f32>) -> Result<()> {
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let p = model.store.get(id);
            let values = self.fetch(&p.name, p.tensor.shape())?.to_vec();
            model.store.tensor_mut(id).data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, model: &Model<f32>, opt: &mut AdamW<f32>) -> Result<()> {
        for (i, (_, p)) in model.store.iter().enumerate() {
            opt.m[i] = self.fetch(&format!("{ADAM_M}{}", p.name), p.tensor.shape())?.to_vec();
            opt.v[i] = self.fetch(&format!("{ADAM_V}{}", p.name), p.tensor.shape())?.to_vec();
        }
        opt.step = self.header.adam_step;
        Ok(())
    }

    /// Model built from the stored config with the stored parameters.
    pub fn model(&self) -> Result<Model<f32>> {
        let cfg = &self.header.config;
        let mut model = Model::new(&cfg.model, cfg.seed)?;
        self.restore_model(&mut model)?;
        Ok(model)
    }

    /// Trainer that resumes exactly where the saved one stopped.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut t = Trainer::new(self.header.config.clone())?;
        self.restore_model(&mut t.model)?;
        self.restore_optimizer(&t.model, &mut t.optimizer)?;
        t.step = self.header.step;
        Ok(t)
    }
}
