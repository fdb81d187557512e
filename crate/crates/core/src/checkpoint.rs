//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"ADVSEQ1"
//! count    u32
//! count × { name_len u16, name utf-8, dtype u8, rank u8, dims rank × u64 }
//! payloads in manifest order, raw little-endian elements
//! ```
//!
//! A training checkpoint stores every parameter under its store name,
//! the optimizer moments as `adam.m.<name>` / `adam.v.<name>`, and the
//! counters `state.step`, `state.adam_step`, `state.seed` as rank-0 u64.
//! Shared embedding tables are stored once and stay shared on load
//! because the model set is rebuilt from its configuration.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ModelSet;
use crate::optim::Adam;
use crate::robust::TrainState;
use crate::tensor::{DType, Real, Tensor};
use crate::transformer::TransformerConfig;

pub const MAGIC: &[u8; 7] = b"ADVSEQ1";

/// One manifest entry with its payload bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Entry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn counter(name: impl Into<String>, v: u64) -> Self {
        Entry {
            name: name.into(),
            dtype: DType::U64,
            shape: Vec::new(),
            bytes: v.to_le_bytes().to_vec(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {} has dtype {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let size = T::DTYPE.size();
        let data = self.bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_counter(&self) -> Result<u64> {
        if self.dtype != DType::U64 || !self.shape.is_empty() {
            return Err(Error::Format(format!("{} is not a u64 scalar", self.name)));
        }
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.bytes);
        Ok(u64::from_le_bytes(b))
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype.code());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for e in entries {
        out.extend_from_slice(&e.bytes);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing ADVSEQ1 magic".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Format(format!("tensor {name} has unknown dtype code {code}")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            bytes: Vec::new(),
        });
    }
    for e in &mut entries {
        let n: usize = e.shape.iter().product();
        e.bytes = r.take(n * e.dtype.size())?.to_vec();
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payloads",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn model_entries<T: Real>(models: &ModelSet<T>) -> Vec<Entry> {
    models
        .store
        .iter()
        .map(|(_, name, t)| Entry::tensor(name, t))
        .collect()
}

pub fn state_entries<T: Real>(state: &TrainState<T>) -> Vec<Entry> {
    let store = &state.models.store;
    let mut out = model_entries(&state.models);
    for (prefix, moments) in [("adam.m.", &state.adam.first), ("adam.v.", &state.adam.second)] {
        for ((_, name, _), t) in store.iter().zip(moments) {
            out.push(Entry::tensor(format!("{prefix}{name}"), t));
        }
    }
    out.push(Entry::counter("state.step", state.step));
    out.push(Entry::counter("state.adam_step", state.adam.step));
    out.push(Entry::counter("state.seed", state.seed));
    out
}

fn fill<T: Real>(models: &ModelSet<T>, by_name: &HashMap<&str, &Entry>, prefix: &str) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    let names: Vec<String> = models.store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let e = by_name
            .get(key.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {key}")))?;
        let t = e.to_tensor::<T>()?;
        let expected = models.store.get(models.store.find(&name).expect("own name")).shape();
        if t.shape() != expected {
            return Err(Error::Format(format!(
                "tensor {key} has shape {:?} but the configuration expects {:?}",
                t.shape(),
                expected
            )));
        }
        out.push(t);
    }
    Ok(out)
}

/// Model parameters only; optimizer and counter entries are ignored.
pub fn load_models<T: Real>(path: &Path, config: &TransformerConfig) -> Result<ModelSet<T>> {
    let entries = read(path)?;
    models_from_entries(&entries, config)
}

pub fn models_from_entries<T: Real>(entries: &[Entry], config: &TransformerConfig) -> Result<ModelSet<T>> {
    let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut models = ModelSet::<T>::init(config, 0)?;
    let tensors = fill(&models, &by_name, "")?;
    let names: Vec<String> = models.store.iter().map(|(_, n, _)| n.to_string()).collect();
    for (name, t) in names.iter().zip(tensors) {
        models.store.assign(name, t)?;
    }
    Ok(models)
}

pub fn save_models<T: Real>(models: &ModelSet<T>, path: &Path) -> Result<()> {
    write(path, &model_entries(models))
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    write(path, &state_entries(state))
}

pub fn load_checkpoint<T: Real>(path: &Path, config: &TransformerConfig) -> Result<TrainState<T>> {
    state_from_entries(&read(path)?, config)
}

pub fn state_from_entries<T: Real>(entries: &[Entry], config: &TransformerConfig) -> Result<TrainState<T>> {
    let models = models_from_entries::<T>(entries, config)?;
    let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let counter = |k: &str| {
        by_name
            .get(k)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks counter {k}")))
            .and_then(|e| e.to_counter())
    };
    let first = fill(&models, &by_name, "adam.m.")?;
    let second = fill(&models, &by_name, "adam.v.")?;
    Ok(TrainState {
        adam: Adam {
            first,
            second,
            step: counter("state.adam_step")?,
        },
        step: counter("state.step")?,
        seed: counter("state.seed")?,
        models,
    })
}
