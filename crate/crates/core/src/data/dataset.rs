//! On-disk dataset layout: a directory of CKMG files plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::grid::CkmGrid;
use crate::data::split::RegionGrid;
use crate::error::{CkmError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub region: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub grids: Vec<DatasetEntry>,
}

pub fn write_dataset(dir: impl AsRef<Path>, grids: &[RegionGrid]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let first = grids
        .first()
        .ok_or_else(|| CkmError::invalid("dataset must contain at least one grid"))?;
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(grids.len());
    for (i, rg) in grids.iter().enumerate() {
        if (rg.grid.height(), rg.grid.width()) != (first.grid.height(), first.grid.width()) {
            return Err(CkmError::invalid(
                "all grids in a dataset must share one size",
            ));
        }
        let file = format!("grid_{i:05}.ckmg");
        rg.grid.save(dir.join(&file))?;
        entries.push(DatasetEntry {
            file,
            region: rg.region,
        });
    }
    let manifest = DatasetManifest {
        height: first.grid.height(),
        width: first.grid.width(),
        grids: entries,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Loads a dataset directory. A single CKMG file is accepted as a one-grid dataset.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<RegionGrid>> {
    let path = path.as_ref();
    if path.is_file() {
        return Ok(vec![RegionGrid {
            region: 0,
            grid: CkmGrid::load(path)?,
        }]);
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(path.join(MANIFEST_FILE))?)?;
    manifest
        .grids
        .iter()
        .map(|e| {
            let file: PathBuf = path.join(&e.file);
            Ok(RegionGrid {
                region: e.region,
                grid: CkmGrid::load(file)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthParams};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grids: Vec<RegionGrid> = (0..3)
            .map(|s| RegionGrid {
                region: s,
                grid: synth_generate(&SynthParams::with_size(16, s)).unwrap(),
            })
            .collect();
        write_dataset(dir.path(), &grids).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), grids);
        let single = read_dataset(dir.path().join("grid_00001.ckmg")).unwrap();
        assert_eq!(single[0].grid, grids[1].grid);
    }
}
