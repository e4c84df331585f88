//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "EVFLCKPT"
//! version      u32      currently 1
//! kind         u32 length + UTF-8
//! metadata     u32 length + UTF-8 JSON (no floating-point values)
//! tensors      u32 count, then per tensor:
//!                u32 name length + UTF-8 name
//!                u32 rank, rank x u64 dims
//!                prod(dims) x f64 (IEEE-754 bits)
//! optimizer    u8 flag (0 = absent, 1 = present); when present:
//!                u64 step, f64 lr, f64 beta1, f64 beta2, f64 epsilon
//!                u32 count, then count x (first moment, second moment),
//!                each encoded like a tensor entry above
//! ```
//!
//! Values are stored as raw bits, so a save/load round trip is exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EVFLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, metadata: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
            optimizer: None,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &serde_json::to_string(&self.metadata)?);
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_tensor(&mut out, name, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.step.to_le_bytes());
                let c = state.config;
                for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_u32(&mut out, state.first.len());
                for (i, (m, v)) in state.first.iter().zip(&state.second).enumerate() {
                    put_tensor(&mut out, &format!("m{i}"), m);
                    put_tensor(&mut out, &format!("v{i}"), v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let kind = r.string()?;
        let metadata = serde_json::from_str(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig {
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let n = r.u32()? as usize;
                let mut first = Vec::with_capacity(n);
                let mut second = Vec::with_capacity(n);
                for _ in 0..n {
                    first.push(r.tensor()?.1);
                    second.push(r.tensor()?.1);
                }
                Some(AdamState::from_parts(config, first, second, step))
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            metadata,
            tensors,
            optimizer,
        })
    }

    /// Hex SHA-256 of the serialized form.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has an impossible shape")))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}
