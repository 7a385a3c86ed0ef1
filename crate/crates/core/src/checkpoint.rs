//! Checkpoint file format.
//!
//! ```text
//! "GLASSFUSE-CKPT-v1\n"          magic, 18 bytes
//! u64 little-endian              header length in bytes
//! header                         UTF-8 JSON: format, config, meta, parameters
//! blob                           little-endian f32 values, parameters in
//!                                manifest order
//! ```
//!
//! Each manifest entry records `name`, `shape`, `offset` (bytes from the
//! start of the blob) and `length` (values).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::segnet::{Network, NetworkConfig};
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const MAGIC: &str = "GLASSFUSE-CKPT-v1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamStore<f32>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: NetworkConfig,
    meta: TrainingMeta,
    parameters: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn new(network: Network, meta: TrainingMeta) -> Self {
        Checkpoint {
            config: network.config,
            params: network.params,
            meta,
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut parameters = Vec::with_capacity(self.params.len());
        let mut blob = Vec::with_capacity(self.params.scalar_count() * 4);
        for (name, t) in self.params.iter() {
            parameters.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
                length: t.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            format: MAGIC.to_string(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            parameters,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 9 + header.len() + blob.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let magic_len = MAGIC.len() + 1;
        if bytes.len() < magic_len + 8 || &bytes[..MAGIC.len()] != MAGIC.as_bytes() || bytes[MAGIC.len()] != b'\n' {
            return Err(bad("missing GLASSFUSE-CKPT-v1 magic"));
        }
        let len_bytes: [u8; 8] = bytes[magic_len..magic_len + 8].try_into().expect("8 bytes");
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_start = magic_len + 8;
        let blob_start = header_start
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[header_start..blob_start])?;
        if header.format != MAGIC {
            return Err(bad("unsupported format version"));
        }
        let blob = &bytes[blob_start..];
        let mut params = ParamStore::new();
        for entry in header.parameters {
            let end = entry
                .offset
                .checked_add(entry.length * 4)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| Error::Checkpoint(format!("parameter {} out of bounds", entry.name)))?;
            let data = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        header.config.validate()?;
        header.config.check_params(&params)?;
        Ok(Checkpoint {
            config: header.config,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::data(path, e.to_string()))
    }
}
