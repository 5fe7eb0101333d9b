//! Model checkpoints: a JSON manifest next to a raw little-endian f64 blob.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{DenoiserGraph, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in values.
    offset: usize,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (JSON) and the sibling `.bin` blob.
pub fn save_checkpoint(model: &DenoiserGraph, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params() {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: *model.config(),
        blob: blob
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(path, e))?;
    std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(&blob, "length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = BTreeMap::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::format(&blob, format!("{} runs past the end", e.name)))?;
        params.insert(e.name, Tensor::new(e.shape, data.to_vec())?);
    }
    DenoiserGraph::from_params(manifest.config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let cfg = ModelConfig {
            hidden: 8,
            time_dim: 4,
            blocks: 2,
            timesteps: 10,
            ..ModelConfig::default()
        };
        let m = DenoiserGraph::new(cfg, 7).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        for (name, t) in m.params() {
            let b = back.param(name).unwrap();
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let cfg = ModelConfig {
            hidden: 4,
            time_dim: 2,
            blocks: 1,
            timesteps: 4,
            ..ModelConfig::default()
        };
        save_checkpoint(&DenoiserGraph::new(cfg, 0).unwrap(), &path).unwrap();
        let blob = path.with_extension("bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("nope.json")), Err(Error::Io { .. })));
    }
}
