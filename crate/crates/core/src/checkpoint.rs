//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json        {"format": 1, "config": {...}, "params": [{"name", "shape", "file"}]}
//! <dir>/<param name>.sciv    one SCIV volume per parameter, dims = tensor shape
//! ```
//!
//! Tensors are stored as raw f32 so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use crate::unet::{NetworkWeights, Param, UNetConfig};
use crate::volume::{read_sciv, write_sciv};

pub const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config: UNetConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(weights: &NetworkWeights<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(weights.params().len());
    for p in weights.params() {
        let file = format!("{}.sciv", p.name);
        write_sciv(p.tensor.shape(), p.tensor.data(), dir.join(&file))?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        config: weights.config().clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(invalid!(
            "{}: checkpoint format {} not supported",
            path.display(),
            manifest.format
        ));
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<NetworkWeights<f32>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in manifest.params {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with("..") {
            return Err(invalid!(
                "checkpoint entry file {:?} escapes the directory",
                entry.file
            ));
        }
        let path = dir.join(&entry.file);
        let (dims, data) = read_sciv(&path)?;
        if dims != entry.shape {
            return Err(Error::Shape(format!(
                "{}: stored dims {dims:?}, manifest says {:?}",
                path.display(),
                entry.shape
            )));
        }
        params.push(Param {
            name: entry.name,
            tensor: Tensor::new(dims, data)?,
        });
    }
    NetworkWeights::from_params(manifest.config, params)
}
