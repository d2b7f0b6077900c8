//! `CMBC` checkpoint container.
//!
//! Layout (little-endian):
//! - magic `CMBC`, format version u32
//! - manifest hash: 32 bytes (SHA-256 of the canonical manifest JSON)
//! - config JSON length u64, then the resolved adapter config as UTF-8 JSON
//! - input dim u64, token count u64
//! - parameter count u32, then per parameter: id length u32, id bytes,
//!   rank u32, extents u64 × rank, f32 payload

use std::path::Path;

use super::config::AdapterConfig;
use super::model::{decays, AdapterParams};
use crate::error::{ComboError, Result};
use crate::features::{write_atomic, Manifest};
use crate::tensor::{ParamStore, Parameter, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMBC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest_hash: [u8; 32],
    pub params: AdapterParams<f32>,
}

impl Checkpoint {
    /// Snapshots parameter values; gradient buffers are not persisted, so the
    /// snapshot carries zeros there and compares equal to its reloaded copy.
    pub fn new<S: Scalar>(params: &AdapterParams<S>, manifest: &Manifest) -> Self {
        let mut params: AdapterParams<f32> = params.cast();
        params.store_mut().zero_grads();
        Checkpoint {
            manifest_hash: manifest.hash(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.manifest_hash);
        let config = serde_json::to_vec(self.params.config()).expect("config serializes");
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.params.input_dim() as u64).to_le_bytes());
        out.extend_from_slice(&(self.params.tokens() as u64).to_le_bytes());
        let store = self.params.store();
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for p in store.iter() {
            out.extend_from_slice(&(p.id.len() as u32).to_le_bytes());
            out.extend_from_slice(p.id.as_bytes());
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(ComboError::format(path, "missing CMBC magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ComboError::format(path, format!("unsupported version {version}")));
        }
        let manifest_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let len = r.u64()? as usize;
        let config: AdapterConfig = serde_json::from_slice(r.take(len)?).map_err(|source| {
            ComboError::Json {
                path: path.to_path_buf(),
                source,
            }
        })?;
        let input_dim = r.u64()? as usize;
        let tokens = r.u64()? as usize;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let id_len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| ComboError::format(path, "parameter id is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let value = Tensor::new(shape, data)?;
            let decay = decays(&id);
            store.push(Parameter::new(id, value, decay))?;
        }
        if r.pos != bytes.len() {
            return Err(ComboError::format(path, "trailing bytes"));
        }
        let params = AdapterParams::from_store(store, config, input_dim, tokens)?;
        Ok(Checkpoint {
            manifest_hash,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ComboError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters for `manifest`, refusing checkpoints trained on another
    /// dataset layout.
    pub fn params_for<S: Scalar>(&self, manifest: &Manifest) -> Result<AdapterParams<S>> {
        if self.manifest_hash != manifest.hash() {
            return Err(ComboError::Manifest(
                "checkpoint was trained against a different manifest".into(),
            ));
        }
        Ok(self.params.cast())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ComboError::format(self.path, "truncated checkpoint"))?;
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
}
