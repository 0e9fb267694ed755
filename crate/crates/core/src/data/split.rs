use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::grid::CkmGrid;
use crate::error::{CkmError, Result};

/// A grid tagged with the physical region it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGrid {
    pub region: u64,
    pub grid: CkmGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CkmGrid>,
    pub test: Vec<CkmGrid>,
    pub train_regions: Vec<u64>,
    pub test_regions: Vec<u64>,
}

/// Splits by region so no region contributes to both sides.
///
/// Distinct regions are shuffled with `seed`; the first `floor(ratio·regions)`
/// go to training and the rest to test.
pub fn split_regions(grids: Vec<RegionGrid>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if grids.len() < 2 {
        return Err(CkmError::invalid("need at least 2 grids to split"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CkmError::invalid(format!(
            "split ratio {ratio} outside (0, 1)"
        )));
    }
    let mut regions: Vec<u64> = grids
        .iter()
        .map(|g| g.region)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    regions.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * regions.len() as f64).floor() as usize;
    let train_set: BTreeSet<u64> = regions[..n_train].iter().copied().collect();

    let mut split = DatasetSplit {
        train: vec![],
        test: vec![],
        train_regions: vec![],
        test_regions: vec![],
    };
    for g in grids {
        if train_set.contains(&g.region) {
            split.train.push(g.grid);
            split.train_regions.push(g.region);
        } else {
            split.test.push(g.grid);
            split.test_regions.push(g.region);
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthParams};

    fn grids(n: usize) -> Vec<RegionGrid> {
        let g = synth_generate(&SynthParams::with_size(16, 1)).unwrap();
        (0..n)
            .map(|i| RegionGrid {
                region: 100 + i as u64,
                grid: g.clone(),
            })
            .collect()
    }

    fn disjoint(s: &DatasetSplit) -> bool {
        s.train_regions.iter().all(|r| !s.test_regions.contains(r))
    }

    #[test]
    fn ten_grids_split_eight_two() {
        let s = split_regions(grids(10), 0.8, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert!(disjoint(&s));
    }

    #[test]
    fn same_seed_same_split() {
        let a = split_regions(grids(10), 0.8, 3).unwrap();
        let b = split_regions(grids(10), 0.8, 3).unwrap();
        assert_eq!(a.train_regions, b.train_regions);
    }

    #[test]
    fn floor_rounding_on_odd_counts() {
        let s = split_regions(grids(3), 0.5, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1, 2));
        assert!(disjoint(&s));
    }

    #[test]
    fn shared_regions_never_straddle() {
        let mut g = grids(6);
        for (i, rg) in g.iter_mut().enumerate() {
            rg.region = (i / 2) as u64;
        }
        let s = split_regions(g, 0.5, 8).unwrap();
        assert!(disjoint(&s));
        assert_eq!(s.train.len() % 2, 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(split_regions(grids(1), 0.5, 0).is_err());
        assert!(split_regions(grids(4), 1.0, 0).is_err());
        assert!(split_regions(grids(4), 0.0, 0).is_err());
    }
}
