//! Versioned key→array container used for checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every array's `f32` values in little-endian order. The header
//! lists each array's name, shape and element offset, and a SHA-256 of the
//! array payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::hex;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIDGANCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arrays: Vec<ArrayEntry>,
    payload_sha256: String,
    meta: serde_json::Value,
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes the container to a temporary sibling and renames it into place.
pub fn write_container(
    path: &Path,
    meta: serde_json::Value,
    arrays: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        arrays: entries,
        payload_sha256: hex(&Sha256::digest(&payload)),
        meta,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(20 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("ckpt.partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a container, verifying magic, version and payload digest.
pub fn read_container(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt(path, "payload digest mismatch"));
    }
    let mut arrays = BTreeMap::new();
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(corrupt(path, format!("array {} runs past the payload", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.insert(entry.name, Tensor::from_vec(&entry.shape, data));
    }
    Ok((header.meta, arrays))
}

/// SHA-256 of a file's bytes, as hex.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
