//! Run manifests and the per-directory lock.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HarnessError, Result};

pub const MANIFEST_DIR: &str = "manifests";
pub const LOCK_FILE: &str = ".timeq.lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    pub config_hash: String,
    pub version: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    /// Numbers, or `"inf"` / `"-inf"` / `"nan"` for non-finite values.
    pub metrics: BTreeMap<String, Value>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str) -> Self {
        Self {
            command: command.to_string(),
            status: Status::Failed,
            config_hash: config_hash.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
            error: None,
        }
    }

    pub fn metric(&mut self, name: &str, v: f64) {
        let value = if v.is_finite() {
            Value::from(v)
        } else if v.is_nan() {
            Value::from("nan")
        } else if v > 0.0 {
            Value::from("inf")
        } else {
            Value::from("-inf")
        };
        self.metrics.insert(name.to_string(), value);
    }

    pub fn path(dir: &Path, command: &str) -> PathBuf {
        dir.join(MANIFEST_DIR).join(format!("{command}.json"))
    }

    /// Writes next to the final path, then renames over it.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path(dir, &self.command);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::schema(path, e))
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(HarnessError::Locked(path.display().to_string()))
            }
            Err(e) => Err(HarnessError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        let err = DirLock::acquire(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("train", "abc");
        m.metric("loss", 0.25);
        m.metric("sqnr", f64::INFINITY);
        m.artifacts.push("model.json".into());
        let p = m.write(dir.path()).unwrap();
        let back = RunManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.metrics["sqnr"], "inf");
        assert!(!p.with_extension("json.tmp").exists());
    }
}
