//! CKM grids: pixel encodings, file I/O, synthetic generation and splitting.

pub mod dataset;
pub mod encoding;
pub mod grid;
pub mod split;
pub mod synth;

pub use dataset::{read_dataset, write_dataset, DatasetManifest};
pub use encoding::{
    aoa_sine_to_pixel, gain_db_to_pixel, pixel_to_aoa_sine, pixel_to_gain_db, AoaReading,
};
pub use grid::{CkmGrid, AOA, GAIN};
pub use split::{split_regions, DatasetSplit, RegionGrid};
pub use synth::{synth_generate, SynthParams};
