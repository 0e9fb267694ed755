//! CKMW weights file: magic, version, JSON descriptor, named tensors, CRC32 trailer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ScoreNet};
use crate::error::{CkmError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::sde::ScheduleSpec;

pub const CKMW_MAGIC: &[u8; 4] = b"CKMW";
pub const CKMW_VERSION: u16 = 1;

/// JSON header of a weights file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub arch: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub channels: usize,
    pub trained_steps: u64,
    #[serde(default = "vp_family")]
    pub family: String,
}

fn vp_family() -> String {
    "VP".to_string()
}

impl Descriptor {
    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            n: self.n,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn arch_config(&self) -> Result<ArchConfig> {
        let mut arch: ArchConfig = self.arch.parse()?;
        arch.channels = self.channels;
        Ok(arch)
    }

    /// Reads only the descriptor, after verifying the CRC of the whole file.
    pub fn from_ckmw(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_crc_trailer(bytes)?;
        read_descriptor(&mut r)
    }
}

fn read_descriptor(r: &mut ByteReader) -> Result<Descriptor> {
    if r.take(4)? != CKMW_MAGIC {
        return Err(CkmError::format("bad magic, not a CKMW file"));
    }
    let version = r.u16()?;
    if version != CKMW_VERSION {
        return Err(CkmError::format(format!(
            "unsupported CKMW version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let desc: Descriptor = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CkmError::format(format!("bad weights descriptor: {e}")))?;
    if desc.family != "VP" {
        return Err(CkmError::format(format!(
            "unsupported SDE family {:?}",
            desc.family
        )));
    }
    Ok(desc)
}

impl ScoreNet {
    pub fn descriptor(&self) -> Descriptor {
        let s = self.schedule.spec();
        Descriptor {
            arch: self.arch.to_string(),
            n: s.n,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            channels: self.arch.channels,
            trained_steps: self.trained_steps,
            family: vp_family(),
        }
    }

    pub fn to_ckmw_bytes(&self) -> Vec<u8> {
        let desc = serde_json::to_vec(&self.descriptor()).expect("descriptor serializes");
        let mut w = ByteWriter::with_capacity(
            64 + desc.len() + 4 * self.params.len() + 64 * self.layout.tensors.len(),
        );
        w.bytes(CKMW_MAGIC);
        w.u16(CKMW_VERSION);
        w.u32(desc.len() as u32);
        w.bytes(&desc);
        w.u32(self.layout.tensors.len() as u32);
        for t in &self.layout.tensors {
            w.u16(t.name.len() as u16);
            w.bytes(t.name.as_bytes());
            w.u8(t.dims.len() as u8);
            for &d in &t.dims {
                w.u32(d as u32);
            }
            for &v in &self.params[t.offset..t.offset + t.len()] {
                w.f32(v);
            }
        }
        w.finish_with_crc()
    }

    pub fn from_ckmw_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_crc_trailer(bytes)?;
        let desc = read_descriptor(&mut r)?;
        let arch = desc.arch_config()?;
        let (layout, _) = super::arch::Layout::build(&arch);
        let count = r.u32()? as usize;
        if count != layout.tensors.len() {
            return Err(CkmError::format(format!(
                "architecture {} has {} tensors, file has {count}",
                desc.arch,
                layout.tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.n_params);
        for expected in &layout.tensors {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CkmError::format("tensor name is not UTF-8"))?;
            if name != expected.name {
                return Err(CkmError::format(format!(
                    "unexpected tensor {name:?}, expected {:?}",
                    expected.name
                )));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != expected.dims {
                return Err(CkmError::format(format!(
                    "tensor {name} has shape {dims:?}, architecture expects {:?}",
                    expected.dims
                )));
            }
            params.extend(r.f32_vec(expected.len())?);
        }
        r.expect_end()?;
        ScoreNet::from_parts(arch, desc.schedule(), desc.trained_steps, params)
    }
}

pub fn save_weights(net: &ScoreNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, net.to_ckmw_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ScoreNet> {
    ScoreNet::from_ckmw_bytes(&fs::read(path)?)
}
