//! Content-addressed weights cache at the edge.
//!
//! Layout: `blobs/<sha256>.ckmw` for payloads and `manifests/<label>.json`
//! for the last manifest seen under each requested label (a version or
//! `latest`), which is what lets construction run offline on a warm cache.
//! Every write is a rename into place, so processes can share one directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{EdgeError, Result};
use crate::manifest::{sha256_hex, ModelManifest};
use crate::registry::write_atomic;

pub const CACHE_ENV: &str = "CKM_CACHE_DIR";

#[derive(Clone, Debug)]
pub struct ModelCache {
    dir: PathBuf,
}

fn check_hash(sha: &str) -> Result<()> {
    if sha.len() == 64
        && sha
            .bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    {
        Ok(())
    } else {
        Err(EdgeError::protocol(format!("malformed sha256 {sha:?}")))
    }
}

/// `$CKM_CACHE_DIR`, else `$XDG_CACHE_HOME/ckm`, else `~/.cache/ckm`.
pub fn default_cache_dir() -> PathBuf {
    if let Some(d) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(d);
    }
    if let Some(d) = std::env::var_os("XDG_CACHE_HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(d).join("ckm");
    }
    match std::env::var_os("HOME") {
        Some(h) => PathBuf::from(h).join(".cache").join("ckm"),
        None => PathBuf::from(".ckm-cache"),
    }
}

impl ModelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("blobs"))?;
        fs::create_dir_all(dir.join("manifests"))?;
        Ok(ModelCache { dir })
    }

    pub fn from_env() -> Result<Self> {
        ModelCache::new(default_cache_dir())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn blob_path(&self, sha256: &str) -> Result<PathBuf> {
        check_hash(sha256)?;
        Ok(self.dir.join("blobs").join(format!("{sha256}.ckmw")))
    }

    /// Path of the verified payload for `manifest`, if cached. A blob that no
    /// longer matches its hash is deleted.
    pub fn get(&self, manifest: &ModelManifest) -> Result<Option<PathBuf>> {
        let path = self.blob_path(&manifest.sha256)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if manifest.verify(&bytes).is_err() {
            warn!("dropping corrupt cache entry {}", path.display());
            let _ = fs::remove_file(&path);
            return Ok(None);
        }
        Ok(Some(path))
    }

    /// Stores a payload after checking it against `manifest`; nothing is
    /// written when the check fails.
    pub fn put(&self, manifest: &ModelManifest, payload: &[u8]) -> Result<PathBuf> {
        manifest.verify(payload)?;
        let path = self.blob_path(&manifest.sha256)?;
        write_atomic(&path, payload)?;
        Ok(path)
    }

    fn manifest_path(&self, label: &str) -> Result<PathBuf> {
        if label != "latest" {
            crate::manifest::check_version_label(label)?;
        }
        Ok(self.dir.join("manifests").join(format!("{label}.json")))
    }

    pub fn remember(&self, label: &str, manifest: &ModelManifest) -> Result<()> {
        write_atomic(
            &self.manifest_path(label)?,
            serde_json::to_string_pretty(manifest)?.as_bytes(),
        )
    }

    pub fn remembered(&self, label: &str) -> Result<Option<ModelManifest>> {
        match fs::read(self.manifest_path(label)?) {
            Ok(b) => Ok(Some(serde_json::from_slice(&b)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Hashes of every stored payload, sorted.
    pub fn blobs(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.dir.join("blobs"))? {
            let name = entry?.file_name();
            if let Some(h) = name.to_str().and_then(|n| n.strip_suffix(".ckmw")) {
                if check_hash(h).is_ok() {
                    out.push(h.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Hashes a file on disk.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
