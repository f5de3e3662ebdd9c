//! Checkpoint format: a JSON manifest (config, seeds, tensor directory) plus
//! one flat little-endian f64 blob holding every parameter tensor in visit
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorcore::{ParamGroup, Tensor, TensorError};

use super::model::{Model, ModelConfig, ModelParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
}

/// Write `model` into `dir` (created if missing).
pub fn save(dir: &Path, model: &Model, init_seed: u64) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    model.params.visit(&mut |name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    });
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.cfg.clone(),
        init_seed,
        tensors,
        blob: BLOB_FILE.to_string(),
    };
    let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    mf.write_all(b"\n")?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

/// Load a checkpoint back into a `Model`, validating names, shapes, and blob
/// length against the manifest.
pub fn load(dir: &Path) -> Result<(Model, Manifest), CheckpointError> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut blob_bytes = Vec::new();
    fs::File::open(dir.join(&manifest.blob))?.read_to_end(&mut blob_bytes)?;
    if blob_bytes.len() % 8 != 0 {
        return Err(CheckpointError::Corrupt("blob length not a multiple of 8".to_string()));
    }
    let values: Vec<f64> = blob_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if total != values.len() {
        return Err(CheckpointError::Corrupt(format!(
            "blob holds {} values, manifest expects {total}",
            values.len()
        )));
    }

    // Rebuild the parameter structure from the config, then fill values by
    // name in visit order.
    manifest.model.validate()?;
    let skeleton = Model::init(manifest.model.clone(), manifest.init_seed)?;
    let mut cursor = 0usize;
    let params: ModelParams = skeleton.params.map(&mut |name, t| {
        let entry = manifest.tensors.get(cursor).ok_or(TensorError::InvalidParameter {
            op: "checkpoint_load",
            detail: format!("manifest is missing tensor `{name}`"),
        })?;
        if entry.name != name || entry.shape != t.shape() {
            return Err(TensorError::InvalidParameter {
                op: "checkpoint_load",
                detail: format!(
                    "tensor mismatch: manifest has `{}` {:?}, model expects `{name}` {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                ),
            });
        }
        let data = values[entry.offset..entry.offset + entry.len].to_vec();
        cursor += 1;
        Tensor::new(entry.shape.clone(), data)
    })?;
    if cursor != manifest.tensors.len() {
        return Err(CheckpointError::Corrupt(
            "manifest lists more tensors than the model holds".to_string(),
        ));
    }
    Ok((Model { cfg: manifest.model.clone(), params }, manifest))
}
