use ckm_core::net::{Descriptor, ScoreNet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EdgeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    #[serde(rename = "N")]
    pub n: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// What the cloud promises about one published set of prior weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: String,
    pub arch: String,
    pub schedule: ScheduleInfo,
    pub payload_len: u64,
    /// Lowercase hex SHA-256 of the CKMW payload.
    pub sha256: String,
    /// Seconds since the Unix epoch.
    pub published_at: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Version labels double as file names, so they are kept to a safe alphabet.
pub fn check_version_label(version: &str) -> Result<()> {
    let ok = !version.is_empty()
        && version.len() <= 64
        && version != "latest"
        && !version.starts_with('.')
        && version
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(EdgeError::InvalidArgument(format!(
            "bad version label {version:?}: use 1-64 of [A-Za-z0-9._-], not starting with '.', and not \"latest\""
        )))
    }
}

impl ModelManifest {
    /// Builds the manifest for a CKMW payload, fully parsing it first so a
    /// corrupt file is never published.
    pub fn for_payload(version: &str, payload: &[u8], published_at: u64) -> Result<Self> {
        check_version_label(version)?;
        let desc = Descriptor::from_ckmw(payload)?;
        ScoreNet::from_ckmw_bytes(payload)?;
        Ok(ModelManifest {
            version: version.to_string(),
            arch: desc.arch.clone(),
            schedule: ScheduleInfo {
                n: desc.n,
                beta_min: desc.beta_min,
                beta_max: desc.beta_max,
            },
            payload_len: payload.len() as u64,
            sha256: sha256_hex(payload),
            published_at,
        })
    }

    pub fn verify(&self, payload: &[u8]) -> Result<()> {
        let actual = sha256_hex(payload);
        if payload.len() as u64 != self.payload_len || actual != self.sha256 {
            return Err(EdgeError::Integrity {
                version: self.version.clone(),
                expected: self.sha256.clone(),
                actual,
            });
        }
        Ok(())
    }
}
