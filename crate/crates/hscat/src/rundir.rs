//! Run directories: each CLI invocation writes its outputs under one
//! directory together with the fully resolved configuration that produced
//! them. A marker file flags runs that aborted before finishing.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{HscatError, Result};
use crate::manifest::hex;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// A run directory that stays marked incomplete until [`RunDir::finish`].
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path` (which must be absent or an empty directory) and marks
    /// it incomplete.
    pub fn create(path: &Path) -> Result<RunDir> {
        if path.exists() {
            let occupied = path.is_file()
                || fs::read_dir(path)
                    .map_err(|e| HscatError::io(path, e))?
                    .next()
                    .is_some();
            if occupied {
                return Err(HscatError::validation(format!(
                    "output directory {} already exists and is not empty",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(path).map_err(|e| HscatError::io(path, e))?;
        fs::write(path.join(INCOMPLETE_MARKER), b"run in progress\n")
            .map_err(|e| HscatError::io(path, e))?;
        Ok(RunDir {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Echo the resolved configuration and return its hash.
    pub fn write_resolved_config(&self, cfg: &serde_json::Value) -> Result<String> {
        let text = serde_json::to_string_pretty(cfg)
            .map_err(|e| HscatError::Format(format!("config encode: {e}")))?;
        let path = self.file(RESOLVED_CONFIG);
        fs::write(&path, &text).map_err(|e| HscatError::io(&path, e))?;
        Ok(config_hash(cfg))
    }

    pub fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| HscatError::Format(format!("{name} encode: {e}")))?;
        let path = self.file(name);
        fs::write(&path, text).map_err(|e| HscatError::io(&path, e))
    }

    /// Remove the incomplete marker; call once all outputs are written.
    pub fn finish(self) -> Result<()> {
        let marker = self.path.join(INCOMPLETE_MARKER);
        fs::remove_file(&marker).map_err(|e| HscatError::io(&marker, e))
    }
}

pub fn is_incomplete(path: &Path) -> bool {
    path.join(INCOMPLETE_MARKER).exists()
}

/// SHA-256 of the canonical (sorted-key) JSON encoding.
pub fn config_hash(cfg: &serde_json::Value) -> String {
    let canonical = serde_json::to_vec(cfg).expect("JSON value always serializes");
    hex(&Sha256::digest(&canonical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn lifecycle_marks_and_clears_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run1");
        let rd = RunDir::create(&run).unwrap();
        assert!(is_incomplete(&run));
        let h = rd.write_resolved_config(&json!({"seed": 7})).unwrap();
        assert_eq!(h.len(), 64);
        rd.finish().unwrap();
        assert!(!is_incomplete(&run));
        // Re-creating over a non-empty directory is a validation error.
        assert!(RunDir::create(&run).is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = json!({"a": 1, "b": [1, 2]});
        let b = json!({"b": [1, 2], "a": 1});
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&json!({"a": 2, "b": [1, 2]})));
    }
}
