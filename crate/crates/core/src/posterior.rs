//! Plug-and-play posterior sampling: predictor–corrector prior steps plus a
//! norm-normalized observation-constraint step through `A ∘ x̂₀ ∘ s_θ`.

use std::time::Instant;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CkmGrid;
use crate::error::{CkmError, Result};
use crate::net::{ScoreNet, Trace};
use crate::observation::Observation;
use crate::ops::OperatorSpec;
use crate::sde::langevin_step;
use crate::tensor::Tensor;

/// Smallest Langevin step handed out by [`epsilon_schedule`].
pub const EPSILON_FLOOR: f64 = 1e-8;
/// Residual norms below this skip the observation step.
pub const RESIDUAL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorConfig {
    /// Corrector (Langevin) steps per iteration.
    pub correctors: usize,
    pub zeta: f64,
    pub snr_r: f64,
    /// Assumed measurement noise; informational, the normalized step does not use it.
    pub sigma: f64,
    pub seed: u64,
    /// Drop `∂s_θ/∂x` from the constraint gradient.
    pub detach_score: bool,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig {
            correctors: 1,
            zeta: 13.0,
            snr_r: 0.16,
            sigma: 0.01,
            seed: 0,
            detach_score: false,
        }
    }
}

impl PosteriorConfig {
    /// Default strength for an operator kind: 10 for JTQR, 13 otherwise.
    pub fn default_zeta(spec: &OperatorSpec) -> f64 {
        match spec {
            OperatorSpec::Jtqr { .. }
            | OperatorSpec::TruncateGain { .. }
            | OperatorSpec::QuantizeAoa { .. } => 10.0,
            _ => 13.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(CkmError::invalid(format!(
                "zeta must be a finite non-negative number, got {}",
                self.zeta
            )));
        }
        if !(self.snr_r > 0.0) {
            return Err(CkmError::invalid(format!(
                "snr_r must be positive, got {}",
                self.snr_r
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(CkmError::invalid(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstructionResult {
    /// Raw final state `x_0` in pixel units.
    pub x_hat: Tensor<f32>,
    /// `‖y − A(x̂₀)‖₂` for `i = N, …, 1`.
    pub residual_trace: Vec<f64>,
    pub runtime_ms: u64,
    pub config: PosteriorConfig,
}

/// JSON sidecar written next to a reconstructed grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSidecar {
    pub residual_trace: Vec<f64>,
    pub config: PosteriorConfig,
    pub operator: OperatorSpec,
    pub runtime_ms: u64,
}

impl ConstructionResult {
    /// Projects `x_hat` onto valid encodings; building cells come from the
    /// operator when it carries them, otherwise from the AoA channel.
    pub fn grid(&self, obs: &Observation) -> Result<CkmGrid> {
        let building = obs.operator().building();
        let known = building.iter().any(|&b| b);
        CkmGrid::from_tensor_projected(&self.x_hat, known.then_some(building))
    }

    pub fn sidecar(&self, obs: &Observation) -> ResultSidecar {
        ResultSidecar {
            residual_trace: self.residual_trace.clone(),
            config: self.config.clone(),
            operator: obs.operator().spec().clone(),
            runtime_ms: self.runtime_ms,
        }
    }
}

/// SNR-targeted Langevin step `ε = 2·(r·‖z_ref‖/‖s‖)²` with a fresh `z_ref`.
pub fn epsilon_schedule<R: Rng + ?Sized>(score: &Tensor<f64>, snr_r: f64, rng: &mut R) -> f64 {
    let z: Tensor<f64> = Tensor::standard_normal(score.shape(), rng);
    epsilon_from_norms(score.norm(), z.norm(), snr_r)
}

fn epsilon_from_norms(score_norm: f64, z_norm: f64, snr_r: f64) -> f64 {
    if score_norm <= 0.0 || !score_norm.is_finite() {
        return EPSILON_FLOOR;
    }
    (2.0 * (snr_r * z_norm / score_norm).powi(2)).max(EPSILON_FLOOR)
}

/// Gradient of `‖y − A(x̂₀(x_i))‖²` w.r.t. `x_i`, plus the residual norm.
///
/// `score` and `trace` come from the network evaluated at `x_i`.
fn residual_gradient(
    net: &ScoreNet,
    x0_hat: &Tensor<f64>,
    trace: &Trace,
    i: usize,
    obs: &Observation,
    detach_score: bool,
) -> Result<(Tensor<f64>, f64)> {
    let op = obs.operator();
    let x0_f32 = x0_hat.to_f32();
    let ax = op.apply(&x0_f32)?;
    let resid: Tensor<f64> = obs.y().to_f64().zip_map(&ax.to_f64(), |y, a| y - a)?;
    let rnorm = resid.norm();
    if rnorm < RESIDUAL_FLOOR {
        return Ok((Tensor::zeros(x0_hat.shape()), rnorm));
    }
    // ∂‖r‖²/∂x̂₀ = −2·Aᵀr, then through x̂₀ = (x_i + (1−ᾱ)s)/√ᾱ.
    let g0 = op.vjp(&x0_f32, &resid.to_f32())?.to_f64().scale(-2.0);
    let ab = net.schedule().alpha_bar(i);
    let mut g = g0.clone();
    if !detach_score {
        let js = net.backward(trace, &g0.to_f32(), None)?.to_f64();
        g = g.add_scaled(&js, 1.0 - ab)?;
    }
    Ok((g.scale(1.0 / ab.sqrt()), rnorm))
}

/// One observation-constraint update `x' − ζ·∇‖r‖²/‖r‖` for a precomputed network trace at `x_i`.
///
/// Returns the new state and the residual norm at `x̂₀(x_i)`.
pub fn observation_constraint_step(
    x_prime: &Tensor<f64>,
    x_i: &Tensor<f64>,
    net: &ScoreNet,
    i: usize,
    obs: &Observation,
    zeta: f64,
    detach_score: bool,
) -> Result<(Tensor<f64>, f64)> {
    let (score, trace) = net.forward_traced(&x_i.to_f32(), i)?;
    let x0_hat = net
        .schedule()
        .progressive_estimate(x_i, &score.to_f64(), i)?;
    constraint_update(x_prime, &x0_hat, &trace, net, i, obs, zeta, detach_score)
}

#[allow(clippy::too_many_arguments)]
fn constraint_update(
    x_prime: &Tensor<f64>,
    x0_hat: &Tensor<f64>,
    trace: &Trace,
    net: &ScoreNet,
    i: usize,
    obs: &Observation,
    zeta: f64,
    detach_score: bool,
) -> Result<(Tensor<f64>, f64)> {
    if zeta == 0.0 {
        // Residual is still reported for the trace.
        let ax = obs.operator().apply(&x0_hat.to_f32())?;
        let r = obs.y().to_f64().zip_map(&ax.to_f64(), |y, a| y - a)?.norm();
        return Ok((x_prime.clone(), r));
    }
    let (g, rnorm) = residual_gradient(net, x0_hat, trace, i, obs, detach_score)?;
    if rnorm < RESIDUAL_FLOOR {
        return Ok((x_prime.clone(), rnorm));
    }
    if !g.is_finite() {
        return Err(CkmError::numerical(format!(
            "non-finite constraint gradient at step {i}"
        )));
    }
    Ok((x_prime.add_scaled(&g, -zeta / rnorm)?, rnorm))
}

/// Reconstructs a grid from `obs`, starting from `x_N ~ N(0, I)`.
///
/// Each step computes `x̂₀` from `x_i`, takes an ancestral predictor step,
/// runs the Langevin correctors with a fresh score at the predicted state and
/// noise level `i − 1` (none on the final step, where no noise is left), and
/// finishes with the observation constraint.
pub fn dps_sample(
    net: &ScoreNet,
    obs: &Observation,
    cfg: &PosteriorConfig,
) -> Result<ConstructionResult> {
    cfg.validate()?;
    let start = Instant::now();
    let shape = obs.operator().input_shape();
    if shape.channels != net.arch().channels {
        return Err(CkmError::ShapeMismatch {
            expected: crate::tensor::Shape::new(net.arch().channels, shape.height, shape.width),
            got: shape,
        });
    }
    let sched = net.schedule();
    let n = sched.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Tensor<f64> = Tensor::standard_normal(shape, &mut rng);
    let mut trace_r = Vec::with_capacity(n);
    for i in (1..=n).rev() {
        let (score, trace) = net.forward_traced(&x.to_f32(), i)?;
        let score = score.to_f64();
        let x0_hat = sched.progressive_estimate(&x, &score, i)?;
        let z: Tensor<f64> = Tensor::standard_normal(shape, &mut rng);
        let mut xp = sched.ancestral_step(&x, &score, i, &z)?;
        if i > 1 {
            for _ in 0..cfg.correctors {
                let s = net.forward(&xp.to_f32(), i - 1)?.to_f64();
                let eps = epsilon_schedule(&s, cfg.snr_r, &mut rng);
                let z: Tensor<f64> = Tensor::standard_normal(shape, &mut rng);
                xp = langevin_step(&xp, &s, eps, &z)?;
            }
        }
        let (next, rnorm) = constraint_update(
            &xp,
            &x0_hat,
            &trace,
            net,
            i,
            obs,
            cfg.zeta,
            cfg.detach_score,
        )?;
        if !next.is_finite() {
            return Err(CkmError::numerical(format!(
                "sampler state became non-finite at step {i}"
            )));
        }
        if i % 50 == 0 {
            debug!("step {i}: residual {rnorm:.5}");
        }
        trace_r.push(rnorm);
        x = next;
    }
    Ok(ConstructionResult {
        x_hat: x.to_f32(),
        residual_trace: trace_r,
        runtime_ms: start.elapsed().as_millis() as u64,
        config: cfg.clone(),
    })
}

/// Plain ancestral sampling from the learned prior.
pub fn prior_sample(net: &ScoreNet, shape: crate::tensor::Shape, seed: u64) -> Result<Tensor<f32>> {
    let sched = net.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Tensor<f64> = Tensor::standard_normal(shape, &mut rng);
    for i in (1..=sched.steps()).rev() {
        let s = net.forward(&x.to_f32(), i)?.to_f64();
        let z: Tensor<f64> = Tensor::standard_normal(shape, &mut rng);
        x = sched.ancestral_step(&x, &s, i, &z)?;
    }
    Ok(x.to_f32())
}
