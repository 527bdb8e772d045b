//! Checkpoint container: `RFCK`, u32 version, u32 entry count, then per entry
//! u32 name length, UTF-8 name, u8 trainable flag, u32 rank, u32 dims and
//! row-major little-endian f32 values. Training state lives in a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingModel, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes, read_json, write_json};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub version: u32,
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub model: ModelConfig,
}

/// SHA-256 of the compact JSON rendering.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("state.json")
}

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Named tensors in file order.
pub fn decode_store(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format(path, "non-UTF-8 name"))?;
        r.take(1)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint entries"));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &EmbeddingModel, state: &TrainingState) -> Result<()> {
    atomic_write(path, &encode_store(&model.store))?;
    write_json(&sidecar(path), state)
}

/// Rebuilds the model from the sidecar's configuration and fills every
/// parameter by name; missing, extra or reshaped entries are errors.
pub fn load_checkpoint(path: &Path) -> Result<(EmbeddingModel, TrainingState)> {
    let state: TrainingState = read_json(&sidecar(path))?;
    let entries = decode_store(&read_bytes(path)?, path)?;
    let mut model = EmbeddingModel::new(state.model.clone(), state.seed)?;
    if entries.len() != model.store.len() {
        return Err(Error::format(
            path,
            format!("{} entries, model has {}", entries.len(), model.store.len()),
        ));
    }
    for (name, t) in entries {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::format(path, format!("unexpected parameter `{name}`")))?;
        if model.store.get(id).shape() != t.shape() {
            return Err(Error::format(
                path,
                format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                ),
            ));
        }
        model.store.set(id, t);
    }
    Ok((model, state))
}
