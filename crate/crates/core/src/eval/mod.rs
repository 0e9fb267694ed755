//! Task-level evaluation: draw a degradation per test grid, reconstruct,
//! score against the ground truth and a prior-free baseline.

pub mod baseline;
pub mod metrics;
pub mod pgm;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CkmGrid;
use crate::error::{CkmError, Result};
use crate::net::ScoreNet;
use crate::observation::{observe, Observation};
use crate::ops::{OperatorSpec, DEFAULT_SECTORS, DEFAULT_TRUNCATE};
use crate::posterior::{dps_sample, PosteriorConfig};

pub use baseline::{naive_estimate, nearest_fill, nearest_upsample};
pub use metrics::{pixel_rmse, rmse_aoa_sine, rmse_gain_db, AOA_SINE_SCALE};
pub use pgm::{dump_triplet, pgm_bytes, write_pgm};

/// Masking ratio range of the random-mask task: 5²/128² to 50²/128².
pub const DEFAULT_MASK_RATIO: (f64, f64) = (25.0 / 16384.0, 2500.0 / 16384.0);
/// Box side range in pixels; the upper end is capped at half the grid side.
pub const DEFAULT_BOX_SIDES: (usize, usize) = (5, 50);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Inpainting a hidden rectangle.
    Ipbox,
    /// Inpainting randomly hidden cells.
    Iprandom,
    /// Super-resolution from block means.
    Sr,
    /// Truncated gain plus quantized AoA.
    Jtqr,
    /// Denoising only.
    Identity,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Ipbox,
        TaskKind::Iprandom,
        TaskKind::Sr,
        TaskKind::Jtqr,
        TaskKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Ipbox => "ipbox",
            TaskKind::Iprandom => "iprandom",
            TaskKind::Sr => "sr",
            TaskKind::Jtqr => "jtqr",
            TaskKind::Identity => "identity",
        }
    }

    pub fn default_zeta(self) -> f64 {
        match self {
            TaskKind::Jtqr => 10.0,
            _ => 13.0,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = CkmError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                CkmError::invalid(format!(
                    "unknown task {s:?} (ipbox, iprandom, sr, jtqr, identity)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub box_sides: (usize, usize),
    pub mask_ratio: (f64, f64),
    pub sr_factor: usize,
    pub truncate: (f64, f64),
    pub sectors: usize,
    pub sigma: f64,
    pub zeta: f64,
    pub correctors: usize,
    pub snr_r: f64,
    pub detach_score: bool,
    pub seed: u64,
    pub include_buildings: bool,
    /// Record wall-clock time; off gives reproducible reports.
    pub timing: bool,
}

impl TaskConfig {
    pub fn new(task: TaskKind) -> Self {
        let post = PosteriorConfig::default();
        TaskConfig {
            task,
            box_sides: DEFAULT_BOX_SIDES,
            mask_ratio: DEFAULT_MASK_RATIO,
            sr_factor: 2,
            truncate: DEFAULT_TRUNCATE,
            sectors: DEFAULT_SECTORS,
            sigma: post.sigma,
            zeta: task.default_zeta(),
            correctors: post.correctors,
            snr_r: post.snr_r,
            detach_score: post.detach_score,
            seed: 0,
            include_buildings: true,
            timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.box_sides;
        if lo == 0 || lo > hi {
            return Err(CkmError::invalid(format!(
                "box side range [{lo}, {hi}] is empty or starts at 0"
            )));
        }
        let (rlo, rhi) = self.mask_ratio;
        if !(0.0 <= rlo && rlo <= rhi && rhi <= 1.0) {
            return Err(CkmError::invalid(format!(
                "mask ratio range [{rlo}, {rhi}] not within [0, 1]"
            )));
        }
        if self.sr_factor < 1 {
            return Err(CkmError::invalid(
                "super-resolution factor must be at least 1",
            ));
        }
        if !(self.sigma >= 0.0) {
            return Err(CkmError::invalid(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        self.posterior(0).validate()
    }

    /// Sampler settings with the given seed.
    pub fn posterior(&self, seed: u64) -> PosteriorConfig {
        PosteriorConfig {
            correctors: self.correctors,
            zeta: self.zeta,
            snr_r: self.snr_r,
            sigma: self.sigma,
            seed,
            detach_score: self.detach_score,
        }
    }

    /// Operator instance and noise/sampler seeds for test grid `index`.
    ///
    /// Depends only on `seed`, the task parameters and the grid size, never on
    /// the sampler settings, so sweeps over `ζ` see identical instances.
    pub fn draw(&self, index: usize, height: usize, width: usize) -> (OperatorSpec, u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let spec = match self.task {
            TaskKind::Ipbox => {
                let cap = |n: usize| self.box_sides.1.min(n / 2).max(1);
                let side = |rng: &mut ChaCha8Rng, n: usize| {
                    rng.random_range(self.box_sides.0.min(cap(n))..=cap(n))
                };
                let bh = side(&mut rng, height);
                let bw = side(&mut rng, width);
                let top = rng.random_range(0..=height - bh);
                let left = rng.random_range(0..=width - bw);
                OperatorSpec::MaskBox {
                    top,
                    left,
                    height: bh,
                    width: bw,
                }
            }
            TaskKind::Iprandom => {
                let (lo, hi) = self.mask_ratio;
                let ratio = if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                };
                OperatorSpec::MaskRandom {
                    ratio,
                    seed: rng.random(),
                }
            }
            TaskKind::Sr => OperatorSpec::Downsample {
                factor: self.sr_factor,
            },
            TaskKind::Jtqr => OperatorSpec::Jtqr {
                a: self.truncate.0,
                b: self.truncate.1,
                k: self.sectors,
            },
            TaskKind::Identity => OperatorSpec::Identity,
        };
        (spec, rng.random(), rng.random())
    }
}

/// Scores for one test grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMetrics {
    pub index: usize,
    pub operator: OperatorSpec,
    pub gain_rmse_db: f64,
    pub aoa_sine_rmse: f64,
    /// The same metrics for [`naive_estimate`].
    pub baseline_gain_rmse_db: f64,
    pub baseline_aoa_sine_rmse: f64,
    /// RMS of `y − A(x̂)` over observed entries.
    pub observed_residual_rms: f64,
    pub final_residual: f64,
    pub runtime_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub grids: usize,
    pub gain_rmse_db: f64,
    pub aoa_sine_rmse: f64,
    pub baseline_gain_rmse_db: f64,
    pub baseline_aoa_sine_rmse: f64,
    pub observed_residual_rms: f64,
    /// Grids whose gain RMSE is strictly below the baseline's.
    pub beats_baseline: usize,
    pub runtime_ms: u64,
}

impl Aggregate {
    pub fn from_grids(per_grid: &[GridMetrics]) -> Self {
        let n = per_grid.len();
        let mean = |f: fn(&GridMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_grid.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Aggregate {
            grids: n,
            gain_rmse_db: mean(|g| g.gain_rmse_db),
            aoa_sine_rmse: mean(|g| g.aoa_sine_rmse),
            baseline_gain_rmse_db: mean(|g| g.baseline_gain_rmse_db),
            baseline_aoa_sine_rmse: mean(|g| g.baseline_aoa_sine_rmse),
            observed_residual_rms: mean(|g| g.observed_residual_rms),
            beats_baseline: per_grid
                .iter()
                .filter(|g| g.gain_rmse_db < g.baseline_gain_rmse_db)
                .count(),
            runtime_ms: per_grid.iter().map(|g| g.runtime_ms).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: TaskConfig,
    /// Architecture, schedule and parameter checksum of the prior.
    pub model: String,
    pub per_grid: Vec<GridMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn model_tag(net: &ScoreNet) -> String {
    let s = net.schedule().spec();
    format!(
        "{} N={} beta=[{}, {}] crc32={:08x}",
        net.arch(),
        s.n,
        s.beta_min,
        s.beta_max,
        net.checksum()
    )
}

/// RMS of `y − A(x)` over the entries the operator actually observes.
pub fn observed_residual_rms(obs: &Observation, x: &crate::tensor::Tensor<f32>) -> Result<f64> {
    let op = obs.operator();
    let ax = op.apply(x)?;
    let plane = ax.shape().plane();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (k, (a, y)) in ax.data().iter().zip(obs.y().data()).enumerate() {
        if op.observed_mask().is_none_or(|m| m[k % plane]) {
            sum += (*y as f64 - *a as f64).powi(2);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { (sum / n as f64).sqrt() })
}

/// Reconstruction of one grid, kept around for dumps.
pub struct GridOutcome {
    pub metrics: GridMetrics,
    pub observation: Observation,
    pub reconstruction: CkmGrid,
    pub baseline: CkmGrid,
}

pub fn evaluate_grid(
    cfg: &TaskConfig,
    net: &ScoreNet,
    index: usize,
    truth: &CkmGrid,
) -> Result<GridOutcome> {
    let (spec, noise_seed, sampler_seed) = cfg.draw(index, truth.height(), truth.width());
    let obs = observe(truth, &spec, cfg.sigma, noise_seed)?;
    let result = dps_sample(net, &obs, &cfg.posterior(sampler_seed))?;
    let recon = result.grid(&obs)?;
    let known_building = obs
        .operator()
        .spec()
        .uses_building()
        .then(|| obs.operator().building());
    let base =
        CkmGrid::from_tensor_projected(&naive_estimate(obs.y(), obs.operator()), known_building)?;
    let metrics = GridMetrics {
        index,
        operator: spec,
        gain_rmse_db: rmse_gain_db(&recon, truth, cfg.include_buildings)?,
        aoa_sine_rmse: rmse_aoa_sine(&recon, truth, cfg.include_buildings)?,
        baseline_gain_rmse_db: rmse_gain_db(&base, truth, cfg.include_buildings)?,
        baseline_aoa_sine_rmse: rmse_aoa_sine(&base, truth, cfg.include_buildings)?,
        observed_residual_rms: observed_residual_rms(&obs, &recon.to_tensor())?,
        final_residual: result.residual_trace.last().copied().unwrap_or(0.0),
        runtime_ms: if cfg.timing { result.runtime_ms } else { 0 },
    };
    Ok(GridOutcome {
        metrics,
        observation: obs,
        reconstruction: recon,
        baseline: base,
    })
}

/// Runs the task over `grids`. With `dump_dir`, PGM triplets are written per grid.
pub fn run_task(
    cfg: &TaskConfig,
    net: &ScoreNet,
    grids: &[CkmGrid],
    dump_dir: Option<&Path>,
) -> Result<MetricsReport> {
    run_task_parallel(cfg, net, grids, dump_dir, 1)
}

/// [`run_task`] with up to `jobs` grids reconstructed concurrently. The
/// report does not depend on `jobs`: every grid's draws come from its index.
pub fn run_task_parallel(
    cfg: &TaskConfig,
    net: &ScoreNet,
    grids: &[CkmGrid],
    dump_dir: Option<&Path>,
    jobs: usize,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if grids.is_empty() {
        return Err(CkmError::invalid("no test grids"));
    }
    if jobs == 0 {
        return Err(CkmError::invalid("jobs must be at least 1"));
    }
    let jobs = jobs.min(grids.len());
    let outcomes: Vec<Result<GridOutcome>> = if jobs == 1 {
        grids
            .iter()
            .enumerate()
            .map(|(index, truth)| evaluate_grid(cfg, net, index, truth))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<GridOutcome>>> = (0..grids.len()).map(|_| None).collect();
        let done: Vec<Vec<(usize, Result<GridOutcome>)>> = std::thread::scope(|s| {
            let workers: Vec<_> = (0..jobs)
                .map(|_| {
                    s.spawn(|| {
                        let mut mine = Vec::new();
                        loop {
                            let index = next.fetch_add(1, Ordering::Relaxed);
                            if index >= grids.len() {
                                break mine;
                            }
                            mine.push((index, evaluate_grid(cfg, net, index, &grids[index])));
                        }
                    })
                })
                .collect();
            workers
                .into_iter()
                .map(|w| w.join().expect("evaluation worker panicked"))
                .collect()
        });
        for (index, out) in done.into_iter().flatten() {
            slots[index] = Some(out);
        }
        slots
            .into_iter()
            .map(|o| o.expect("every grid evaluated"))
            .collect()
    };
    let mut per_grid = Vec::with_capacity(grids.len());
    for (index, (out, truth)) in outcomes.into_iter().zip(grids).enumerate() {
        let out = out?;
        if let Some(dir) = dump_dir {
            dump_triplet(
                dir,
                &format!("{}_{index:03}", cfg.task.name()),
                out.observation.y(),
                truth,
                &out.reconstruction,
            )?;
        }
        info!(
            "{} grid {index}: gain {:.3} dB (baseline {:.3}), aoa {:.4}",
            cfg.task.name(),
            out.metrics.gain_rmse_db,
            out.metrics.baseline_gain_rmse_db,
            out.metrics.aoa_sine_rmse
        );
        per_grid.push(out.metrics);
    }
    let aggregate = Aggregate::from_grids(&per_grid);
    Ok(MetricsReport {
        config: cfg.clone(),
        model: model_tag(net),
        per_grid,
        aggregate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub zeta: f64,
    pub gain_rmse_db: f64,
    pub aoa_sine_rmse: f64,
    pub report: MetricsReport,
}

/// Results of a `ζ` sweep, ordered by `ζ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZetaSweep {
    pub points: Vec<SweepPoint>,
}

impl ZetaSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("zeta,gain_rmse_db,aoa_sine_rmse\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.zeta, p.gain_rmse_db, p.aoa_sine_rmse)
                .expect("string write");
        }
        out
    }

    /// Index of the lowest gain RMSE.
    pub fn argmin(&self) -> Option<usize> {
        (0..self.points.len()).min_by(|&a, &b| {
            self.points[a]
                .gain_rmse_db
                .total_cmp(&self.points[b].gain_rmse_db)
        })
    }

    /// Whether some interior `ζ` beats both ends of the sweep.
    pub fn has_interior_minimum(&self) -> bool {
        let (Some(first), Some(last)) = (self.points.first(), self.points.last()) else {
            return false;
        };
        let inner = &self.points[1..self.points.len().saturating_sub(1).max(1)];
        inner
            .iter()
            .any(|p| p.gain_rmse_db < first.gain_rmse_db && p.gain_rmse_db < last.gain_rmse_db)
    }
}

/// Runs `cfg` once per `ζ`; every run shares the operator, noise and sampler seeds.
pub fn zeta_sweep(
    cfg: &TaskConfig,
    net: &ScoreNet,
    grids: &[CkmGrid],
    zetas: &[f64],
) -> Result<ZetaSweep> {
    zeta_sweep_parallel(cfg, net, grids, zetas, 1)
}

pub fn zeta_sweep_parallel(
    cfg: &TaskConfig,
    net: &ScoreNet,
    grids: &[CkmGrid],
    zetas: &[f64],
    jobs: usize,
) -> Result<ZetaSweep> {
    let mut sorted = zetas.to_vec();
    if sorted.iter().any(|z| !z.is_finite()) {
        return Err(CkmError::invalid("zeta values must be finite"));
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() != zetas.len() {
        return Err(CkmError::invalid("duplicate zeta values in sweep"));
    }
    if sorted.len() < 3 {
        return Err(CkmError::invalid(format!(
            "a sweep needs at least 3 zeta values, got {}",
            sorted.len()
        )));
    }
    let mut points = Vec::with_capacity(sorted.len());
    for zeta in sorted {
        let report = run_task_parallel(
            &TaskConfig {
                zeta,
                ..cfg.clone()
            },
            net,
            grids,
            None,
            jobs,
        )?;
        info!("zeta {zeta}: gain {:.3} dB", report.aggregate.gain_rmse_db);
        points.push(SweepPoint {
            zeta,
            gain_rmse_db: report.aggregate.gain_rmse_db,
            aoa_sine_rmse: report.aggregate.aoa_sine_rmse,
            report,
        });
    }
    Ok(ZetaSweep { points })
}
