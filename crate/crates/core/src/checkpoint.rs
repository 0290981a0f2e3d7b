//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LBCK"  u8 version
//! u32 meta_len   meta_len bytes of JSON (model config, class names, extras)
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 decay_exempt, u8 rank, rank x u32 dims, f32 values
//! u64 FNV-1a digest of every preceding byte
//! ```
//!
//! The digest is verified before anything else is parsed.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LBCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    /// Free-form run information (dataset kind, split seed, ...).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
}

pub fn digest(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(
    model: &Model<f32>,
    class_names: &[String],
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<Vec<u8>> {
    if class_names.len() != model.config.num_classes {
        return Err(Error::arg(format!(
            "{} class names for a {}-class model",
            class_names.len(),
            model.config.num_classes
        )));
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        class_names: class_names.to_vec(),
        extra,
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for e in model.params.entries() {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.decay_exempt as u8);
        out.push(e.tensor.rank() as u8);
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let d = digest(&out);
    out.extend_from_slice(&d.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("unexpected end of data"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 1 + 8 {
        return Err(bad("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let actual = digest(body);
    if stored != actual {
        return Err(bad(format!(
            "digest mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    if &body[..4] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    if body[4] != VERSION {
        return Err(bad(format!("unsupported version {}", body[4])));
    }
    let mut r = Reader { bytes: body, at: 5 };
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::<f32>::default();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let exempt = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(
            name,
            Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?,
            exempt,
        )?;
    }
    if r.at != body.len() {
        return Err(bad(format!(
            "{} trailing bytes after tensors",
            body.len() - r.at
        )));
    }
    let model = Model::from_parts(meta.config.clone(), params)?;
    Ok(Checkpoint { meta, model })
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    class_names: &[String],
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let bytes = encode(model, class_names, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and checks the stored architecture against `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    let diff = expected.architecture_diff(&ck.meta.config);
    if diff.is_empty() {
        Ok(ck)
    } else {
        Err(Error::ConfigMismatch(diff))
    }
}
