//! Pixel encodings for the gain and AoA-sine channels.
//!
//! Gain in dB over `[-250, -50]` maps linearly onto `[0, 1]`. The sine of
//! the angle of arrival maps onto `[0.3, 1]`; pixel `0` is reserved for
//! building cells, and the open gap `(0, 0.3)` is never a valid encoding.

use crate::error::{CkmError, Result};

pub const GAIN_DB_MIN: f64 = -250.0;
pub const GAIN_DB_MAX: f64 = -50.0;
pub const GAIN_DB_SPAN: f64 = GAIN_DB_MAX - GAIN_DB_MIN;

pub const AOA_PIXEL_MIN: f64 = 0.3;
pub const AOA_SLOPE: f64 = 0.35;
pub const AOA_OFFSET: f64 = 0.65;

/// Slack for float32 round-off at the edges of the AoA range.
pub const ENCODING_TOL: f64 = 1e-6;

/// Decoded AoA-sine pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AoaReading {
    /// Building cell: no received signal, no angle.
    NoSignal,
    Sine(f64),
}

impl AoaReading {
    pub fn sine(self) -> Option<f64> {
        match self {
            AoaReading::NoSignal => None,
            AoaReading::Sine(s) => Some(s),
        }
    }
}

/// Out-of-range gains saturate at the ends of the encoding.
pub fn gain_db_to_pixel(g_db: f64) -> Result<f64> {
    if g_db.is_nan() {
        return Err(CkmError::invalid("gain is NaN"));
    }
    Ok((g_db.clamp(GAIN_DB_MIN, GAIN_DB_MAX) - GAIN_DB_MIN) / GAIN_DB_SPAN)
}

pub fn pixel_to_gain_db(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CkmError::Encoding(format!("gain pixel {p} outside [0, 1]")));
    }
    Ok(GAIN_DB_MIN + GAIN_DB_SPAN * p)
}

pub fn aoa_sine_to_pixel(s: f64, is_building: bool) -> Result<f64> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(CkmError::invalid(format!("sine {s} outside [-1, 1]")));
    }
    Ok(if is_building {
        0.0
    } else {
        AOA_SLOPE * s + AOA_OFFSET
    })
}

pub fn pixel_to_aoa_sine(p: f64) -> Result<AoaReading> {
    if p == 0.0 {
        return Ok(AoaReading::NoSignal);
    }
    if !(AOA_PIXEL_MIN - ENCODING_TOL..=1.0 + ENCODING_TOL).contains(&p) {
        return Err(CkmError::Encoding(format!(
            "AoA pixel {p} is neither 0 nor in [0.3, 1]"
        )));
    }
    Ok(AoaReading::Sine(
        ((p - AOA_OFFSET) / AOA_SLOPE).clamp(-1.0, 1.0),
    ))
}

/// Whether `p` is a legal AoA-sine pixel (building or signal).
pub fn is_valid_aoa_pixel(p: f64) -> bool {
    p == 0.0 || (AOA_PIXEL_MIN - ENCODING_TOL..=1.0 + ENCODING_TOL).contains(&p)
}
