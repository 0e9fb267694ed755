//! Denoising score matching: loss, parameter gradients and the training loop.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ScoreNet;
use crate::error::{CkmError, Result};
use crate::tensor::Tensor;

/// Per-timestep weight applied to the score-matching error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain squared score error; dominated by the smallest-noise steps.
    Unweighted,
    /// Weight `1 − ᾱ_i`, which balances the error across noise levels.
    #[default]
    NoiseVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Loss is logged as a window mean every this many steps.
    pub log_every: usize,
    pub weighting: LossWeighting,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 1000,
            learning_rate: 2e-4,
            ema_decay: 0.999,
            seed: 0,
            log_every: 50,
            weighting: LossWeighting::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CkmError::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CkmError::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(CkmError::invalid(format!(
                "EMA decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.log_every == 0 {
            return Err(CkmError::invalid("log interval must be at least 1"));
        }
        Ok(())
    }
}

/// One `(x0, i, z0)` training triple.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x0: Tensor<f32>,
    pub i: usize,
    pub z0: Tensor<f32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss at the first step, before any update.
    pub initial_loss: f64,
    /// Mean batch loss over the last 10% of steps.
    pub final_loss: f64,
    /// `(step, mean loss since the previous entry)`.
    pub log: Vec<(usize, f64)>,
}

/// Noisy input and Tweedie target for one sample.
fn noisy_pair(net: &ScoreNet, s: &TrainSample) -> Result<(Tensor<f32>, Vec<f64>)> {
    CkmError::check_shape(s.x0.shape(), s.z0.shape())?;
    let sched = net.schedule();
    if s.i == 0 || s.i > sched.steps() {
        return Err(CkmError::invalid(format!(
            "timestep {} outside [1, {}]",
            s.i,
            sched.steps()
        )));
    }
    let z0 = s.z0.to_f64();
    let xi = sched.perturb(&s.x0.to_f64(), s.i, &z0)?.to_f32();
    let target = sched.score_from_noise(&z0, s.i)?.into_vec();
    Ok((xi, target))
}

fn weight(net: &ScoreNet, weighting: LossWeighting, i: usize) -> f64 {
    match weighting {
        LossWeighting::Unweighted => 1.0,
        LossWeighting::NoiseVariance => 1.0 - net.schedule().alpha_bar(i),
    }
}

/// Mean weighted loss of a batch, accumulating its gradient into `grads`.
fn accumulate(
    net: &ScoreNet,
    batch: &[TrainSample],
    weighting: LossWeighting,
    grads: &mut [f32],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CkmError::invalid("empty batch"));
    }
    let mut total = 0.0;
    for s in batch {
        let (xi, target) = noisy_pair(net, s)?;
        let (out, trace) = net.forward_traced(&xi, s.i)?;
        let w = weight(net, weighting, s.i);
        let n = target.len() as f64;
        let diff: Vec<f64> = out
            .data()
            .iter()
            .zip(&target)
            .map(|(&o, &t)| o as f64 - t)
            .collect();
        total += w * diff.iter().map(|d| d * d).sum::<f64>() / n;
        let k = 2.0 * w / (n * batch.len() as f64);
        let cot = Tensor::from_vec(out.shape(), diff.iter().map(|d| (k * d) as f32).collect())?;
        net.backward(&trace, &cot, Some(grads))?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean squared error between the network output and the Tweedie score target.
pub fn loss(net: &ScoreNet, x0: &Tensor<f32>, i: usize, z0: &Tensor<f32>) -> Result<f64> {
    let s = TrainSample {
        x0: x0.clone(),
        i,
        z0: z0.clone(),
    };
    let (xi, target) = noisy_pair(net, &s)?;
    let out = net.forward(&xi, i)?;
    let sq: f64 = out
        .data()
        .iter()
        .zip(&target)
        .map(|(&o, &t)| (o as f64 - t).powi(2))
        .sum();
    Ok(sq / target.len() as f64)
}

/// Gradient of the batch-mean [`loss`] with respect to every parameter, in layout order.
pub fn grad_params(net: &ScoreNet, batch: &[TrainSample]) -> Result<Vec<f32>> {
    let mut g = vec![0.0f32; net.n_params()];
    accumulate(net, batch, LossWeighting::Unweighted, &mut g)?;
    Ok(g)
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let (b1, b2) = (Self::B1 as f32, Self::B2 as f32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m as f64 / c1;
            let vhat = *v as f64 / c2;
            *p -= (lr * mhat / (vhat.sqrt() + Self::EPS)) as f32;
        }
    }
}

/// Trains `init` on clean samples and returns the EMA weights.
///
/// Each step draws a batch of samples with replacement, a timestep uniformly
/// from `1..=N` and fresh Gaussian noise per sample.
pub fn train(
    init: &ScoreNet,
    dataset: &[Tensor<f32>],
    cfg: &TrainConfig,
) -> Result<(ScoreNet, TrainReport)> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| CkmError::invalid("empty training set"))?;
    for x in dataset {
        CkmError::check_shape(first.shape(), x.shape())?;
    }
    let mut net = init.clone();
    let mut ema = init.params().to_vec();
    let mut adam = Adam {
        m: vec![0.0; net.n_params()],
        v: vec![0.0; net.n_params()],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_steps = net.schedule().steps();
    let mut report = TrainReport::default();
    let tail_start = cfg.steps - cfg.steps / 10;
    let (mut tail_sum, mut tail_n) = (0.0, 0usize);
    let (mut window, mut window_n) = (0.0, 0usize);
    let mut grads = vec![0.0f32; net.n_params()];

    for step in 0..cfg.steps {
        let batch: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|_| {
                let x0 = dataset[rng.random_range(0..dataset.len())].clone();
                let i = rng.random_range(1..=n_steps);
                let z0 = Tensor::standard_normal(x0.shape(), &mut rng);
                TrainSample { x0, i, z0 }
            })
            .collect();
        grads.fill(0.0);
        let l = accumulate(&net, &batch, cfg.weighting, &mut grads)?;
        if !l.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(CkmError::numerical(format!(
                "training diverged at step {step} (loss {l})"
            )));
        }
        if step == 0 {
            report.initial_loss = l;
        }
        if step >= tail_start {
            tail_sum += l;
            tail_n += 1;
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .iter()
                .map(|&g| g as f64 * g as f64)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        adam.step(net.params_mut(), &grads, cfg.learning_rate);
        // Warm-up keeps early EMA weights from lingering at the initialization.
        let decay = cfg
            .ema_decay
            .min((1.0 + step as f64) / (10.0 + step as f64)) as f32;
        for (e, &p) in ema.iter_mut().zip(net.params()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
        window += l;
        window_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            let mean = window / window_n as f64;
            debug!("step {} loss {mean:.5}", step + 1);
            report.log.push((step + 1, mean));
            (window, window_n) = (0.0, 0);
        }
    }
    report.final_loss = if tail_n > 0 {
        tail_sum / tail_n as f64
    } else {
        report.initial_loss
    };
    info!(
        "trained {} steps: initial loss {:.5}, final loss {:.5}",
        cfg.steps, report.initial_loss, report.final_loss
    );
    let out = ScoreNet::from_parts(
        net.arch.clone(),
        net.schedule.spec(),
        init.trained_steps() + cfg.steps as u64,
        ema,
    )?;
    Ok((out, report))
}
