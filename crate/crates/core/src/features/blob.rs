//! `CMBF` map blobs: one file per (backbone, layer) holding every sample.
//!
//! Layout (little-endian):
//! - magic `CMBF`
//! - format version: u32
//! - num_samples: u64
//! - values per sample (tokens × dim): u64
//! - payload: f32 × num_samples × values per sample, row-major

use std::io::Write;
use std::path::Path;

use crate::error::{ComboError, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"CMBF";
pub const BLOB_VERSION: u32 = 1;
pub const BLOB_HEADER_LEN: usize = 24;

pub fn blob_file_name(backbone_id: &str, layer_id: u32) -> String {
    format!("{backbone_id}.{layer_id}.f32")
}

pub fn encode_blob(num_samples: usize, per_sample: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(data.len(), num_samples * per_sample, "blob payload size");
    let mut out = Vec::with_capacity(BLOB_HEADER_LEN + data.len() * 4);
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(num_samples as u64).to_le_bytes());
    out.extend_from_slice(&(per_sample as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a blob, checking it against the expected sample count and map
/// size. Non-finite values are rejected.
pub fn decode_blob(
    bytes: &[u8],
    num_samples: usize,
    per_sample: usize,
    path: &Path,
) -> Result<Vec<f32>> {
    if bytes.len() < BLOB_HEADER_LEN || &bytes[..4] != BLOB_MAGIC {
        return Err(ComboError::format(path, "missing CMBF magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != BLOB_VERSION {
        return Err(ComboError::format(path, format!("unsupported version {version}")));
    }
    let (n, per) = (u64_at(8), u64_at(16));
    if n != num_samples as u64 || per != per_sample as u64 {
        return Err(ComboError::format(
            path,
            format!("header says {n}×{per}, manifest expects {num_samples}×{per_sample}"),
        ));
    }
    let payload = &bytes[BLOB_HEADER_LEN..];
    if payload.len() != num_samples * per_sample * 4 {
        return Err(ComboError::format(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), num_samples * per_sample * 4),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(ComboError::Data(format!(
            "{}: non-finite value at element {i}",
            path.display()
        )));
    }
    Ok(data)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| ComboError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| ComboError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ComboError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| ComboError::io(path, e))
}
