//! Cloud-side store of published priors.
//!
//! On disk a registry is a directory holding `registry.json` (manifests in
//! publish order plus the current-version marker) and `weights/<version>.ckmw`.
//! Payloads are held in memory once opened; desk-scale models are small.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{EdgeError, Result};
use crate::manifest::ModelManifest;

const INDEX_FILE: &str = "registry.json";
const WEIGHTS_DIR: &str = "weights";

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    current: Option<String>,
    models: Vec<ModelManifest>,
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    index: Index,
    payloads: HashMap<String, Arc<Vec<u8>>>,
}

/// Writes `bytes` next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let tmp = parent.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

impl Registry {
    /// Opens the registry at `dir`, creating an empty one if needed, and
    /// checks every payload against its manifest.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(WEIGHTS_DIR))?;
        let index_path = dir.join(INDEX_FILE);
        let index: Index = if index_path.exists() {
            serde_json::from_slice(&fs::read(&index_path)?)?
        } else {
            Index::default()
        };
        let mut payloads = HashMap::new();
        for m in &index.models {
            let bytes = fs::read(dir.join(WEIGHTS_DIR).join(format!("{}.ckmw", m.version)))?;
            m.verify(&bytes)?;
            if payloads
                .insert(m.version.clone(), Arc::new(bytes))
                .is_some()
            {
                return Err(EdgeError::DuplicateVersion(m.version.clone()));
            }
        }
        match &index.current {
            Some(v) if !payloads.contains_key(v) => {
                return Err(EdgeError::Registry(format!(
                    "current version {v:?} is not in the index"
                )))
            }
            None if !index.models.is_empty() => {
                return Err(EdgeError::Registry(
                    "models listed but no current version".into(),
                ))
            }
            _ => {}
        }
        Ok(Registry {
            dir,
            index,
            payloads,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Manifests in publish order.
    pub fn list(&self) -> &[ModelManifest] {
        &self.index.models
    }

    pub fn current(&self) -> Option<&ModelManifest> {
        let v = self.index.current.as_ref()?;
        self.index.models.iter().find(|m| &m.version == v)
    }

    /// Looks up a version; `"latest"` means the current one.
    pub fn manifest(&self, version: &str) -> Result<&ModelManifest> {
        let found = if version == "latest" {
            self.current()
        } else {
            self.index.models.iter().find(|m| m.version == version)
        };
        found.ok_or_else(|| EdgeError::UnknownVersion(version.to_string()))
    }

    pub fn payload(&self, version: &str) -> Result<Arc<Vec<u8>>> {
        let m = self.manifest(version)?;
        Ok(Arc::clone(&self.payloads[&m.version]))
    }

    /// Publishes a CKMW payload under a new version and makes it current.
    pub fn publish_bytes(
        &mut self,
        payload: Vec<u8>,
        version: &str,
        published_at: u64,
    ) -> Result<ModelManifest> {
        if self.payloads.contains_key(version) {
            return Err(EdgeError::DuplicateVersion(version.to_string()));
        }
        let manifest = ModelManifest::for_payload(version, &payload, published_at)?;
        write_atomic(
            &self.dir.join(WEIGHTS_DIR).join(format!("{version}.ckmw")),
            &payload,
        )?;
        let mut index = Index {
            current: Some(version.to_string()),
            models: self.index.models.clone(),
        };
        index.models.push(manifest.clone());
        write_atomic(
            &self.dir.join(INDEX_FILE),
            serde_json::to_string_pretty(&index)?.as_bytes(),
        )?;
        self.index = index;
        self.payloads.insert(version.to_string(), Arc::new(payload));
        info!(
            "published {version} ({} bytes, sha256 {})",
            manifest.payload_len, manifest.sha256
        );
        Ok(manifest)
    }

    pub fn publish(
        &mut self,
        weights: impl AsRef<Path>,
        version: &str,
        published_at: u64,
    ) -> Result<ModelManifest> {
        self.publish_bytes(fs::read(weights)?, version, published_at)
    }
}
