//! Checkpoint container: a JSON manifest followed by a raw array blob.
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"SIMVACK1"
//! 8       8     manifest length L, u64 little-endian
//! 16      L     manifest, UTF-8 JSON (see below)
//! 16+L    ...   blob: array data, little-endian, concatenated in manifest order
//! ```
//!
//! The manifest is a JSON object with keys `version` (1), `metadata`
//! (step, config hash, free-form extras), `config` (embedded run
//! configuration or `null`) and `arrays`, an object mapping each array name
//! to `{shape, dtype, offset, byte_length}` with `dtype` one of `"f32"` or
//! `"f64"` and offsets relative to the start of the blob. Offsets are
//! contiguous: each array starts where the previous one ended, and the blob
//! is exactly as long as the last array's end.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimvaError};
use crate::params::{DType, ParameterStore, StoreMetadata};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SIMVACK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub metadata: StoreMetadata,
    pub config: Option<serde_json::Value>,
    pub arrays: IndexMap<String, ArrayEntry>,
}

/// A parameter store plus the configuration it was produced under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParameterStore,
    pub config: Option<serde_json::Value>,
}

pub fn to_bytes(store: &ParameterStore, config: Option<&serde_json::Value>) -> Result<Vec<u8>> {
    let mut arrays = IndexMap::new();
    let mut blob = Vec::new();
    for (name, a) in store.iter() {
        let offset = blob.len() as u64;
        match a.dtype {
            DType::F64 => a.tensor.data().iter().for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
            DType::F32 => a
                .tensor
                .data()
                .iter()
                .for_each(|&x| blob.extend_from_slice(&(x as f32).to_le_bytes())),
        }
        arrays.insert(
            name.to_string(),
            ArrayEntry {
                shape: a.tensor.shape().to_vec(),
                dtype: a.dtype,
                offset,
                byte_length: blob.len() as u64 - offset,
            },
        );
    }
    let manifest = Manifest {
        version: VERSION,
        metadata: store.metadata.clone(),
        config: config.cloned(),
        arrays,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(SimvaError::format("missing SIMVACK1 magic header"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            SimvaError::format(format!(
                "manifest claims bytes 16..{} but file has {} bytes",
                16u64.saturating_add(mlen as u64),
                bytes.len()
            ))
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..blob_start])
        .map_err(|e| SimvaError::format(format!("manifest is not valid JSON: {e}")))?;
    if manifest.version != VERSION {
        return Err(SimvaError::format(format!("unsupported container version {}", manifest.version)));
    }
    let blob = &bytes[blob_start..];
    let mut store = ParameterStore::new();
    let mut expected_offset = 0u64;
    for (name, e) in &manifest.arrays {
        let n: usize = e.shape.iter().product();
        let want = (n * e.dtype.size()) as u64;
        if e.byte_length != want {
            return Err(SimvaError::format(format!(
                "array `{name}`: shape {:?} as {:?} needs {want} bytes but manifest says {}",
                e.shape, e.dtype, e.byte_length
            )));
        }
        if e.offset != expected_offset {
            return Err(SimvaError::format(format!(
                "array `{name}`: offset {} but previous array ends at {expected_offset}",
                e.offset
            )));
        }
        let end = e.offset + e.byte_length;
        if end > blob.len() as u64 {
            return Err(SimvaError::format(format!(
                "array `{name}` spans blob bytes {}..{end} but blob has only {} bytes",
                e.offset,
                blob.len()
            )));
        }
        let raw = &blob[e.offset as usize..end as usize];
        let data: Vec<f64> = match e.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        store.insert_with_dtype(name.clone(), Tensor::new(e.shape.clone(), data)?, e.dtype)?;
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(SimvaError::format(format!(
            "blob has {} bytes but manifest accounts for {expected_offset}",
            blob.len()
        )));
    }
    store.metadata = manifest.metadata;
    Ok(Checkpoint {
        store,
        config: manifest.config,
    })
}

pub fn save(path: impl AsRef<Path>, store: &ParameterStore, config: Option<&serde_json::Value>) -> Result<()> {
    std::fs::write(path, to_bytes(store, config)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
