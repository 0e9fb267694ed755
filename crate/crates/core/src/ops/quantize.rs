//! Angular quantizer acting on AoA-sine pixels.

use crate::data::encoding::{AOA_OFFSET, AOA_SLOPE};
use crate::error::{CkmError, Result};

/// Uniform `K`-sector angle quantizer reporting sector centers.
///
/// Sector `k` covers `[−180° + kΔ, −180° + (k+1)Δ)` with `Δ = 360°/K` and
/// reports its center. Pixels only carry `sin θ`, so the angle is taken on
/// the principal branch `[−90°, 90°]` and sectors become intervals of the
/// pixel axis. Output levels are fixed points: for `K ≡ 3 (mod 4)` the level
/// of the sector straddling −90° sits exactly on the next boundary, and the
/// half-open rule alone would not be idempotent there.
#[derive(Clone, Debug, PartialEq)]
pub struct AoaQuantizer {
    k: usize,
    levels: Vec<f32>,
    /// Pixel value of boundary `j + 1`, `±∞` off the principal branch.
    thresholds: Vec<f32>,
}

impl AoaQuantizer {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(CkmError::invalid(format!(
                "quantizer needs K >= 2 sectors, got {k}"
            )));
        }
        let levels = (0..k)
            .map(|s| level_pixel(sector_center_deg(k, s)))
            .collect();
        let thresholds = (1..k)
            .map(|j| {
                let b = -180.0 + j as f64 * 360.0 / k as f64;
                if b < -90.0 {
                    f32::NEG_INFINITY
                } else if b > 90.0 {
                    f32::INFINITY
                } else {
                    level_pixel(b)
                }
            })
            .collect();
        Ok(AoaQuantizer {
            k,
            levels,
            thresholds,
        })
    }

    pub fn sectors(&self) -> usize {
        self.k
    }

    pub fn step_deg(&self) -> f64 {
        360.0 / self.k as f64
    }

    /// Sector index of an angle in degrees; `+180°` wraps to `−180°`.
    pub fn sector_of(&self, theta_deg: f64) -> usize {
        let t = if theta_deg >= 180.0 {
            theta_deg - 360.0
        } else {
            theta_deg
        };
        let s = ((t + 180.0) / self.step_deg()).floor();
        (s.max(0.0) as usize).min(self.k - 1)
    }

    pub fn center_deg(&self, sector: usize) -> f64 {
        sector_center_deg(self.k, sector)
    }

    /// Output pixel for each sector.
    pub fn levels(&self) -> &[f32] {
        &self.levels
    }

    /// Quantizes one non-building AoA pixel. Total: out-of-range inputs act like `sin θ = ±1`.
    pub fn quantize_pixel(&self, p: f32) -> f32 {
        if self.levels.contains(&p) {
            return p;
        }
        let p = if p.is_nan() { AOA_OFFSET as f32 } else { p };
        self.levels[self.thresholds.partition_point(|&t| t <= p)]
    }
}

fn sector_center_deg(k: usize, sector: usize) -> f64 {
    -180.0 + (sector as f64 + 0.5) * 360.0 / k as f64
}

fn level_pixel(theta_deg: f64) -> f32 {
    (AOA_SLOPE * theta_deg.to_radians().sin() + AOA_OFFSET) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k12_first_sector_reports_15() {
        let q = AoaQuantizer::new(12).unwrap();
        for theta in [0.0, 10.0, 29.999] {
            assert_eq!(q.center_deg(q.sector_of(theta)), 15.0);
        }
        assert_eq!(q.center_deg(q.sector_of(30.0)), 45.0);
    }

    #[test]
    fn k24_seven_degrees() {
        let q = AoaQuantizer::new(24).unwrap();
        let p = level_pixel(7.0);
        let expected = (0.35 * 7.5f64.to_radians().sin() + 0.65) as f32;
        assert_eq!(q.quantize_pixel(p), expected);
    }

    #[test]
    fn wraps_plus_180() {
        let q = AoaQuantizer::new(8).unwrap();
        assert_eq!(q.sector_of(180.0), 0);
        assert_eq!(q.sector_of(-180.0), 0);
        assert_eq!(q.sector_of(179.9), 7);
    }

    #[test]
    fn idempotent_on_levels() {
        for k in 2..=36 {
            let q = AoaQuantizer::new(k).unwrap();
            for p in (0..=700).map(|j| 0.3 + j as f32 * 0.001) {
                let once = q.quantize_pixel(p);
                assert_eq!(q.quantize_pixel(once), once, "K={k} p={p}");
            }
        }
    }

    #[test]
    fn half_open_rule_alone_breaks_idempotence_for_k_3_mod_4() {
        for k in (3..=35).step_by(4) {
            let q = AoaQuantizer::new(k).unwrap();
            let bottom = q.sector_of(-90.0);
            let level = q.levels[bottom];
            let by_threshold = q.thresholds.partition_point(|&t| t <= level);
            assert_eq!(by_threshold, bottom + 1, "K={k}");
            assert_eq!(q.quantize_pixel(level), level);
        }
    }

    #[test]
    fn rejects_small_k() {
        assert!(AoaQuantizer::new(1).is_err());
    }
}
