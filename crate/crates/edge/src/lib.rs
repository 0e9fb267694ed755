//! Cloud-edge distribution of CKM priors.
//!
//! The cloud keeps a [`Registry`] of published weights and serves it over
//! CKMP, a small length-prefixed binary protocol. Edge nodes fetch a version
//! once into a content-addressed [`ModelCache`] and then run posterior
//! sampling locally for whatever forward operator their measurements need.

pub mod cache;
pub mod client;
pub mod error;
pub mod manifest;
pub mod protocol;
pub mod registry;
pub mod server;

use std::fs;
use std::path::{Path, PathBuf};

use ckm_core::net::load_weights;
use ckm_core::observation::Observation;
use ckm_core::ops::{ForwardOperator, OperatorSpec};
use ckm_core::posterior::{dps_sample, PosteriorConfig};
use log::info;

pub use cache::{default_cache_dir, ModelCache, CACHE_ENV};
pub use client::{Client, TransferStats};
pub use error::{EdgeError, Result};
pub use manifest::{sha256_hex, ModelManifest, ScheduleInfo};
pub use protocol::{Frame, FrameType, CKMP_MAGIC};
pub use registry::Registry;
pub use server::{serve, ServerHandle, ServerStats};

#[derive(Clone, Debug)]
pub struct Fetched {
    pub manifest: ModelManifest,
    pub path: PathBuf,
    /// The payload was already cached; no weights crossed the wire.
    pub cache_hit: bool,
    /// The server could not be reached and a remembered manifest was used.
    pub offline: bool,
    pub transfer: TransferStats,
}

/// Makes `version` (or `"latest"`) available in `cache` and returns its path.
///
/// A cache hit costs one manifest round trip. If the server is unreachable, a
/// manifest remembered from an earlier fetch of the same label is used when
/// its payload is still cached.
pub fn fetch_model(addr: &str, version: &str, cache: &ModelCache) -> Result<Fetched> {
    let mut client = match Client::connect(addr) {
        Ok(c) => c,
        Err(err @ EdgeError::Connect { .. }) => {
            if let Some(manifest) = cache.remembered(version)? {
                if let Some(path) = cache.get(&manifest)? {
                    info!("{addr} unreachable, using cached {}", manifest.version);
                    return Ok(Fetched {
                        manifest,
                        path,
                        cache_hit: true,
                        offline: true,
                        transfer: TransferStats::default(),
                    });
                }
            }
            return Err(err);
        }
        Err(e) => return Err(e),
    };
    let manifest = client.manifest(version)?;
    if version != "latest" && manifest.version != version {
        return Err(EdgeError::protocol(format!(
            "asked for {version}, got manifest for {}",
            manifest.version
        )));
    }
    let (path, cache_hit) = match cache.get(&manifest)? {
        Some(p) => (p, true),
        None => {
            let payload = client.weights(&manifest.version)?;
            (cache.put(&manifest, &payload)?, false)
        }
    };
    cache.remember(version, &manifest)?;
    info!(
        "{} {} ({} bytes on the wire)",
        manifest.version,
        if cache_hit { "cache hit" } else { "fetched" },
        client.stats().total()
    );
    Ok(Fetched {
        manifest,
        path,
        cache_hit,
        offline: false,
        transfer: client.stats(),
    })
}

/// Where the prior for a construction comes from.
#[derive(Clone, Debug)]
pub enum ModelSource {
    Local(PathBuf),
    Remote {
        addr: String,
        version: String,
        cache: ModelCache,
    },
}

#[derive(Clone, Debug)]
pub struct Construction {
    pub grid_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub fetched: Option<Fetched>,
}

/// Rebinds the observation to the operator described by `operator_json`,
/// keeping its input shape and building layout.
pub fn rebind_operator(obs: Observation, operator_json: &str) -> Result<Observation> {
    let spec = OperatorSpec::from_json(operator_json)?;
    let old = obs.operator();
    let building = spec.uses_building().then(|| old.building());
    let op = ForwardOperator::new(spec, old.input_shape(), building)?;
    let sigma = obs.sigma();
    Ok(Observation::new(obs.y().clone(), op, sigma)?)
}

/// Sidecar path for a result grid: same stem, `.json` extension.
pub fn sidecar_path(grid_path: &Path) -> PathBuf {
    grid_path.with_extension("json")
}

/// Fetches (or reuses) the prior, runs posterior sampling on the observation
/// and writes the projected grid plus a JSON sidecar.
///
/// Outputs are only written once sampling has succeeded. With `timing` off
/// the sidecar records a runtime of 0 so reruns are byte-identical.
pub fn edge_construct(
    source: &ModelSource,
    observation: &Path,
    operator_json: Option<&str>,
    cfg: &PosteriorConfig,
    timing: bool,
    out: &Path,
) -> Result<Construction> {
    let (weights, fetched) = match source {
        ModelSource::Local(p) => (p.clone(), None),
        ModelSource::Remote {
            addr,
            version,
            cache,
        } => {
            let f = fetch_model(addr, version, cache)?;
            (f.path.clone(), Some(f))
        }
    };
    let net = load_weights(&weights)?;
    let mut obs = Observation::load(observation)?;
    if let Some(json) = operator_json {
        obs = rebind_operator(obs, json)?;
    }
    let mut result = dps_sample(&net, &obs, cfg)?;
    if !timing {
        result.runtime_ms = 0;
    }
    let grid = result.grid(&obs)?;
    let sidecar = sidecar_path(out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    registry::write_atomic(out, &grid.to_bytes())?;
    registry::write_atomic(
        &sidecar,
        serde_json::to_string_pretty(&result.sidecar(&obs))?.as_bytes(),
    )?;
    Ok(Construction {
        grid_path: out.to_path_buf(),
        sidecar_path: sidecar,
        fetched,
    })
}
