//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `CHSIMCKP`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor as little-endian `f32` in header
//! order. The header lists `{name, shape, offset}` for each tensor (offset in
//! elements from the start of the data block) plus model metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

const MAGIC: &[u8; 8] = b"CHSIMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    /// "encoder" | "generator" | "discriminator" | "projection" | "train_state"
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_channels: Option<usize>,
    pub config_hash: String,
    /// Free-form model metadata (architecture knobs, label names, step counters).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str) -> Self {
        Self {
            header: Header {
                version: FORMAT_VERSION,
                kind: kind.to_string(),
                d_c: None,
                n_channels: None,
                config_hash: config_hash.to_string(),
                meta: serde_json::Value::Null,
                tensors: Vec::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    /// Add every tensor of `store`, prefixing names with `prefix`.
    pub fn insert_store<F: Float>(&mut self, prefix: &str, store: &ParamStore<F>) {
        for (name, t) in store.named_tensors() {
            self.insert(format!("{prefix}{name}"), t.cast());
        }
    }

    /// Restore a store written by [`Checkpoint::insert_store`] with the same prefix.
    pub fn load_store<F: Float>(&self, prefix: &str, store: &mut ParamStore<F>) -> Result<()> {
        store.load_from(|name| self.tensors.get(&format!("{prefix}{name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.tensors.clear();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            header.tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor {} is truncated", e.name)));
            }
            let vals = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, vals)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_path(dir)?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).with_path(path)?;
        f.write_all(&bytes).with_path(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .with_path(path)?;
        Self::from_bytes(&bytes)
    }
}
