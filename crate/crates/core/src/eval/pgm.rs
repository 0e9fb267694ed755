//! 8-bit binary PGM dumps for eyeballing reconstructions.

use std::fs;
use std::path::Path;

use crate::data::CkmGrid;
use crate::error::{CkmError, Result};
use crate::tensor::Tensor;

/// Encodes one `[0, 1]` plane as a binary (P5) PGM; values are clamped.
pub fn pgm_bytes(width: usize, height: usize, plane: &[f32]) -> Result<Vec<u8>> {
    if plane.len() != width * height {
        return Err(CkmError::invalid(format!(
            "{} values for a {width}x{height} image",
            plane.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, plane: &[f32]) -> Result<()> {
    fs::write(path, pgm_bytes(width, height, plane)?)?;
    Ok(())
}

/// Writes `{stem}_{obs,truth,recon}_{gain,aoa}.pgm` into `dir`.
///
/// The observation is dumped at its own resolution.
pub fn dump_triplet(
    dir: impl AsRef<Path>,
    stem: &str,
    y: &Tensor<f32>,
    truth: &CkmGrid,
    recon: &CkmGrid,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ys = y.shape();
    let write = |tag: &str, w: usize, h: usize, gain: &[f32], aoa: &[f32]| -> Result<()> {
        write_pgm(dir.join(format!("{stem}_{tag}_gain.pgm")), w, h, gain)?;
        write_pgm(dir.join(format!("{stem}_{tag}_aoa.pgm")), w, h, aoa)
    };
    let aoa_y = y.channel(if ys.channels > 1 { 1 } else { 0 });
    write("obs", ys.width, ys.height, y.channel(0), aoa_y)?;
    write(
        "truth",
        truth.width(),
        truth.height(),
        truth.gain(),
        truth.aoa_sine(),
    )?;
    write(
        "recon",
        recon.width(),
        recon.height(),
        recon.gain(),
        recon.aoa_sine(),
    )
}
