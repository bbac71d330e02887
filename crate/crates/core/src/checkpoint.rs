//! Binary checkpoints: a key-value header plus named `f64` tensors, closed
//! by a SHA-256 digest of everything before it.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FWAVCKPT" | u32 version | u32 header_len | header (key = value text)
//! u32 n_tensors | per tensor: u32 name_len, name, u32 ndim, u64 dims.., f64 data..
//! [u8; 32] sha256
//! ```
//!
//! Tensors are stored in name order, so encoding is canonical and a
//! save → load → save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Parameterized;
use crate::kv::KeyValues;
use crate::optim::{AdamState, Moments};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FWAVCKPT";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: KeyValues,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(header: KeyValues) -> Self {
        Checkpoint {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header.render();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Verifies the digest before parsing anything else.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch, file is corrupted"));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header =
            std::str::from_utf8(r.take(header_len)?).map_err(|_| bad("header is not UTF-8"))?;
        let header = KeyValues::parse(header)?;
        let n = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| bad(format!("tensor `{name}` is too large")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| bad("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if tensors
                .insert(name.clone(), Tensor::new(&shape, data)?)
                .is_some()
            {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    /// Stores every parameter of `model` under its own name.
    pub fn put_params(&mut self, model: &impl Parameterized) {
        for p in model.params() {
            self.tensors.insert(p.name.clone(), p.value.clone());
        }
    }

    /// Overwrites the parameters of `model`, which must match by name and
    /// shape. Nothing is written unless every parameter matches.
    pub fn restore_params(&self, model: &mut impl Parameterized) -> Result<()> {
        for p in model.params() {
            let t = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| bad(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!(
                    "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
        }
        for p in model.params_mut() {
            p.value = self.tensors[&p.name].clone();
        }
        Ok(())
    }

    pub fn put_optimizer(&mut self, adam: &AdamState) {
        self.header.set("adam.base_lr", adam.base_lr);
        self.header.set("adam.decay_factor", adam.decay_factor);
        self.header.set("adam.decay_interval", adam.decay_interval);
        self.header.set("adam.step", adam.step);
        for (name, m) in &adam.moments {
            self.tensors
                .insert(format!("{MOMENT1}{name}"), m.first.clone());
            self.tensors
                .insert(format!("{MOMENT2}{name}"), m.second.clone());
        }
    }

    pub fn optimizer(&self) -> Result<AdamState> {
        let mut adam = AdamState::new(
            self.header.require("adam.base_lr")?,
            self.header.require("adam.decay_factor")?,
            self.header.require("adam.decay_interval")?,
        );
        adam.step = self.header.require("adam.step")?;
        for (key, first) in &self.tensors {
            let Some(name) = key.strip_prefix(MOMENT1) else {
                continue;
            };
            let second = self
                .tensors
                .get(&format!("{MOMENT2}{name}"))
                .ok_or_else(|| bad(format!("second moment of `{name}` missing")))?;
            adam.moments.insert(
                name.to_string(),
                Moments {
                    first: first.clone(),
                    second: second.clone(),
                },
            );
        }
        Ok(adam)
    }
}
