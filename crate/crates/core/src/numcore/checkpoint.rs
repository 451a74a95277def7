//! Checkpoint layout: `manifest.json` lists every tensor as
//! `{name, shape, byte_offset}` in store order; `params.bin` holds the values
//! as consecutive little-endian `f64`s.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::params::ParamStore;
use crate::numcore::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "sati-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (the model configuration).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(store: &ParamStore, meta: serde_json::Value) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.scalar_count() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            byte_offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (
        Manifest {
            format: FORMAT.to_string(),
            tensors,
            meta,
        },
        blob,
    )
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + n * 8;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} runs past the end of the blob", entry.name))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(store)
}

pub fn save(dir: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(store, meta);
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let store = decode(&manifest, &blob)?;
    Ok((store, manifest.meta))
}
