//! Time-conditioned U-Net score model `s_θ(x, i)` with hand-written gradients.

mod arch;
mod kernels;
mod train;
mod unet;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use arch::{ArchConfig, TensorInfo};
pub use train::{grad_params, loss, train, LossWeighting, TrainConfig, TrainReport, TrainSample};
pub use unet::Trace;
pub use weights::{load_weights, save_weights, Descriptor, CKMW_MAGIC, CKMW_VERSION};

use crate::error::{CkmError, Result};
use crate::sde::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{Shape, Tensor};
use arch::{Init, Layout};

/// Weights of the score network plus the metadata needed to interpret them.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    arch: ArchConfig,
    schedule: NoiseSchedule,
    trained_steps: u64,
    layout: Layout,
    params: Vec<f32>,
}

impl PartialEq for ScoreNet {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.schedule.spec() == other.schedule.spec()
            && self.trained_steps == other.trained_steps
            && self.params == other.params
    }
}

impl ScoreNet {
    /// Freshly initialized network; the output head starts at zero so the score is 0 everywhere.
    pub fn init(arch: ArchConfig, schedule: ScheduleSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let schedule = schedule.build()?;
        let (layout, inits) = Layout::build(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; layout.n_params];
        for (t, init) in layout.tensors.iter().zip(&inits) {
            let dst = &mut params[t.offset..t.offset + t.len()];
            match *init {
                Init::Zero => dst.fill(0.0),
                Init::One => dst.fill(1.0),
                Init::Fan(fan_in) => {
                    let std = (1.0 / fan_in as f64).sqrt();
                    for v in dst {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = (std * z) as f32;
                    }
                }
            }
        }
        Ok(ScoreNet {
            arch,
            schedule,
            trained_steps: 0,
            layout,
            params,
        })
    }

    /// Assembles a network from a flat parameter vector in layout order.
    pub fn from_parts(
        arch: ArchConfig,
        schedule: ScheduleSpec,
        trained_steps: u64,
        params: Vec<f32>,
    ) -> Result<Self> {
        arch.validate()?;
        let schedule = schedule.build()?;
        let (layout, _) = Layout::build(&arch);
        if params.len() != layout.n_params {
            return Err(CkmError::invalid(format!(
                "architecture {arch} needs {} parameters, got {}",
                layout.n_params,
                params.len()
            )));
        }
        if let Some(t) = layout.tensors.iter().find(|t| {
            params[t.offset..t.offset + t.len()]
                .iter()
                .any(|v| !v.is_finite())
        }) {
            return Err(CkmError::numerical(format!(
                "tensor {} has non-finite values",
                t.name
            )));
        }
        Ok(ScoreNet {
            arch,
            schedule,
            trained_steps,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let t = self.layout.tensors.iter().find(|t| t.name == name)?;
        Some(&self.params[t.offset..t.offset + t.len()])
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// CRC32 of the raw parameter bytes; a cheap identity check for weights.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in &self.params {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }

    fn check_input(&self, shape: Shape, i: usize) -> Result<()> {
        if shape.channels != self.arch.channels {
            return Err(CkmError::ShapeMismatch {
                expected: Shape::new(self.arch.channels, shape.height, shape.width),
                got: shape,
            });
        }
        let f = self.arch.spatial_factor();
        if shape.height == 0
            || shape.width == 0
            || !shape.height.is_multiple_of(f)
            || !shape.width.is_multiple_of(f)
        {
            return Err(CkmError::invalid(format!(
                "spatial size {shape} must be a non-zero multiple of {f}"
            )));
        }
        if i == 0 || i > self.schedule.steps() {
            return Err(CkmError::invalid(format!(
                "timestep {i} outside [1, {}]",
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    /// Score estimate at timestep `i`, shaped like `x`.
    pub fn forward(&self, x: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
        Ok(self.forward_traced(x, i)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns the trace for a later [`backward`](Self::backward).
    pub fn forward_traced(&self, x: &Tensor<f32>, i: usize) -> Result<(Tensor<f32>, Trace)> {
        let s = x.shape();
        self.check_input(s, i)?;
        let (y, trace) = self.forward_raw(x.data(), s.height, s.width, i);
        Ok((Tensor::from_vec(s, y)?, trace))
    }

    /// Input gradient for a recorded trace; accumulates parameter gradients when asked.
    pub fn backward(
        &self,
        trace: &Trace,
        cotangent: &Tensor<f32>,
        param_grads: Option<&mut [f32]>,
    ) -> Result<Tensor<f32>> {
        let (h, w) = trace.dims();
        let s = Shape::new(self.arch.channels, h, w);
        CkmError::check_shape(s, cotangent.shape())?;
        if let Some(g) = &param_grads {
            if g.len() != self.params.len() {
                return Err(CkmError::invalid(format!(
                    "gradient buffer has {} entries, network has {}",
                    g.len(),
                    self.params.len()
                )));
            }
        }
        Tensor::from_vec(s, self.backward_raw(trace, cotangent.data(), param_grads))
    }

    /// `cotangentᵀ·∂forward(x, i)/∂x`.
    pub fn vjp_input(
        &self,
        x: &Tensor<f32>,
        i: usize,
        cotangent: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        CkmError::check_shape(x.shape(), cotangent.shape())?;
        let (_, trace) = self.forward_traced(x, i)?;
        self.backward(&trace, cotangent, None)
    }
}
