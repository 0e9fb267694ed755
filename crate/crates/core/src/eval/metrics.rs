//! RMSE in physical units.
//!
//! Both metrics are linear rescalings of the pixel-domain RMSE: gain by the
//! 200 dB span of its encoding, AoA-sine by `2 / 0.7 = 20/7`.

use crate::data::encoding::{AOA_PIXEL_MIN, GAIN_DB_SPAN};
use crate::data::CkmGrid;
use crate::error::{CkmError, Result};

pub const AOA_SINE_SCALE: f64 = 2.0 / (1.0 - AOA_PIXEL_MIN);

/// RMSE over the cells where `select` is true (all cells when `None`).
pub fn pixel_rmse(a: &[f32], b: &[f32], select: Option<&[bool]>) -> Result<f64> {
    if a.len() != b.len() || select.is_some_and(|s| s.len() != a.len()) {
        return Err(CkmError::invalid(format!(
            "cannot compare {} cells with {}",
            a.len(),
            b.len()
        )));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for k in 0..a.len() {
        if select.is_none_or(|s| s[k]) {
            let d = a[k] as f64 - b[k] as f64;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CkmError::invalid("no cells selected for RMSE"));
    }
    Ok((sum / n as f64).sqrt())
}

fn free_cells(truth: &CkmGrid, include_buildings: bool) -> Option<Vec<bool>> {
    (!include_buildings).then(|| truth.building().iter().map(|&b| !b).collect())
}

fn check_dims(x_hat: &CkmGrid, truth: &CkmGrid) -> Result<()> {
    if (x_hat.height(), x_hat.width()) != (truth.height(), truth.width()) {
        return Err(CkmError::ShapeMismatch {
            expected: truth.data_shape(),
            got: x_hat.data_shape(),
        });
    }
    Ok(())
}

/// Gain RMSE in dB. Building cells are selected by the ground truth.
pub fn rmse_gain_db(x_hat: &CkmGrid, truth: &CkmGrid, include_buildings: bool) -> Result<f64> {
    check_dims(x_hat, truth)?;
    let sel = free_cells(truth, include_buildings);
    Ok(GAIN_DB_SPAN * pixel_rmse(x_hat.gain(), truth.gain(), sel.as_deref())?)
}

/// AoA-sine RMSE, computed on pixels and then rescaled.
pub fn rmse_aoa_sine(x_hat: &CkmGrid, truth: &CkmGrid, include_buildings: bool) -> Result<f64> {
    check_dims(x_hat, truth)?;
    let sel = free_cells(truth, include_buildings);
    Ok(AOA_SINE_SCALE * pixel_rmse(x_hat.aoa_sine(), truth.aoa_sine(), sel.as_deref())?)
}
