//! Procedural CKM generator: log-distance pathloss, wall penetration loss and
//! spatially correlated log-normal shadowing around a single base station.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::encoding::{aoa_sine_to_pixel, gain_db_to_pixel};
use crate::data::grid::CkmGrid;
use crate::error::{CkmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub size: usize,
    /// Inclusive range of building counts.
    pub buildings: (usize, usize),
    /// Inclusive range of building side lengths, in cells.
    pub building_side: (usize, usize),
    /// Gain at the 1-cell reference distance.
    pub reference_gain_db: f64,
    /// `g = ref − 10·n·log10(d)`.
    pub pathloss_exponent: f64,
    pub wall_loss_db: f64,
    pub shadowing_std_db: f64,
    /// Standard deviation of the Gaussian kernel that correlates shadowing, in cells.
    pub shadowing_corr_cells: f64,
    pub seed: u64,
}

impl SynthParams {
    /// Defaults scaled to a `size×size` grid.
    pub fn with_size(size: usize, seed: u64) -> Self {
        SynthParams {
            size,
            buildings: (3, 8),
            building_side: ((size / 10).max(2), (size / 4).max(3)),
            reference_gain_db: -30.0,
            pathloss_exponent: 2.0,
            wall_loss_db: 25.0,
            shadowing_std_db: 4.0,
            shadowing_corr_cells: size as f64 / 16.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(CkmError::invalid(format!(
                "grid size {} below minimum 16",
                self.size
            )));
        }
        let (bmin, bmax) = self.buildings;
        let (smin, smax) = self.building_side;
        if bmin > bmax || smin > smax || smin == 0 || smax > self.size {
            return Err(CkmError::invalid("empty building count or side range"));
        }
        if !(self.shadowing_std_db >= 0.0
            && self.shadowing_corr_cells >= 0.0
            && self.wall_loss_db >= 0.0)
        {
            return Err(CkmError::invalid(
                "shadowing and wall loss must be non-negative",
            ));
        }
        Ok(())
    }
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams::with_size(64, 0)
    }
}

/// Generates one grid. Identical parameters give bit-identical output.
pub fn synth_generate(params: &SynthParams) -> Result<CkmGrid> {
    params.validate()?;
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut building = vec![false; n * n];
    let count = rng.random_range(params.buildings.0..=params.buildings.1);
    for _ in 0..count {
        let h = rng.random_range(params.building_side.0..=params.building_side.1);
        let w = rng.random_range(params.building_side.0..=params.building_side.1);
        let top = rng.random_range(0..=n - h);
        let left = rng.random_range(0..=n - w);
        for r in top..top + h {
            building[r * n + left..r * n + left + w].fill(true);
        }
    }

    let free: Vec<usize> = (0..n * n).filter(|&i| !building[i]).collect();
    if free.is_empty() {
        return Err(CkmError::invalid("no free cell for base station placement"));
    }
    let bs_idx = free[rng.random_range(0..free.len())];
    let (bs_r, bs_c) = (bs_idx / n, bs_idx % n);

    let shadow = correlated_field(n, params.shadowing_corr_cells, &mut rng);

    let mut gain = vec![0.0f32; n * n];
    let mut aoa = vec![0.0f32; n * n];
    for r in 0..n {
        for c in 0..n {
            let idx = r * n + c;
            if building[idx] {
                continue;
            }
            let dy = bs_r as f64 - r as f64;
            let dx = c as f64 - bs_c as f64;
            let d = dy.hypot(dx);
            let walls = wall_crossings(&building, n, (bs_r, bs_c), (r, c));
            let mut g_db = params.reference_gain_db
                - 10.0 * params.pathloss_exponent * d.max(1.0).log10()
                - params.wall_loss_db * walls as f64;
            // The reference point itself carries no shadowing.
            if d >= 1.0 {
                g_db += params.shadowing_std_db * shadow[idx];
            }
            gain[idx] = gain_db_to_pixel(g_db)? as f32;
            let sine = dy.atan2(dx).sin();
            aoa[idx] = aoa_sine_to_pixel(sine.clamp(-1.0, 1.0), false)? as f32;
        }
    }
    CkmGrid::new(n, n, gain, aoa, building, Some((bs_r, bs_c)))
}

/// Number of building-boundary crossings on the straight segment between two cell centres.
pub fn wall_crossings(
    building: &[bool],
    width: usize,
    from: (usize, usize),
    to: (usize, usize),
) -> usize {
    let (r0, c0) = (from.0 as f64 + 0.5, from.1 as f64 + 0.5);
    let (r1, c1) = (to.0 as f64 + 0.5, to.1 as f64 + 0.5);
    let len = (r1 - r0).hypot(c1 - c0);
    let steps = (len * 4.0).ceil() as usize;
    let mut inside = building[from.0 * width + from.1];
    let mut crossings = 0;
    for k in 1..=steps {
        let t = k as f64 / steps as f64;
        let r = (r0 + t * (r1 - r0)).floor() as usize;
        let c = (c0 + t * (c1 - c0)).floor() as usize;
        let b = building[r * width + c];
        if b != inside {
            crossings += 1;
            inside = b;
        }
    }
    crossings
}

/// Unit-variance Gaussian random field: white noise blurred by a separable
/// Gaussian kernel, then rescaled by the kernel's energy.
fn correlated_field(n: usize, corr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    if corr <= 0.0 {
        return white;
    }
    let radius = (3.0 * corr).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * corr * corr)).exp())
        .collect();
    // Variance after both passes is (Σk²)².
    let energy: f64 = kernel.iter().map(|k| k * k).sum();
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let off = ki as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r as isize, reflect(c as isize + off, n))
                    } else {
                        (reflect(r as isize + off, n), c as isize)
                    };
                    acc += k * src[rr as usize * n + cc as usize];
                }
                out[r * n + c] = acc;
            }
        }
        out
    };
    let field = blur(&blur(&white, true), false);
    field.into_iter().map(|v| v / energy).collect()
}

fn reflect(i: isize, n: usize) -> isize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i;
        }
    }
}
