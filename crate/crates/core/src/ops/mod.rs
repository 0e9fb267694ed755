//! Degradation operators `A(·)` with their vector–Jacobian products.
//!
//! Every operator keeps the channel layout of the model tensor (gain, AoA).
//! Masks zero out unobserved cells instead of dropping them and carry the
//! observed-cell pattern explicitly, because 0 is also the building value.

mod quantize;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use quantize::AoaQuantizer;

use crate::data::{encoding, AOA, GAIN};
use crate::error::{CkmError, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_TRUNCATE: (f64, f64) = (0.2, 0.7);
pub const DEFAULT_SECTORS: usize = 24;

fn default_a() -> f64 {
    DEFAULT_TRUNCATE.0
}

fn default_b() -> f64 {
    DEFAULT_TRUNCATE.1
}

fn default_k() -> usize {
    DEFAULT_SECTORS
}

/// JSON-serializable operator configuration, e.g. `{"kind": "downsample", "factor": 2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    /// Hides a `height×width` box whose top-left cell is `(top, left)`.
    MaskBox {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Hides `⌊ratio·H·W⌋` cells chosen by `seed`.
    MaskRandom {
        ratio: f64,
        seed: u64,
    },
    /// Mean over `factor×factor` blocks.
    Downsample {
        factor: usize,
    },
    /// Clamps gain pixels to `[a, b]`; AoA passes through.
    TruncateGain {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
    },
    /// Quantizes AoA pixels to `k` angular sectors; gain passes through.
    QuantizeAoa {
        #[serde(default = "default_k", alias = "K")]
        k: usize,
    },
    /// Gain truncation plus AoA quantization.
    Jtqr {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_b")]
        b: f64,
        #[serde(default = "default_k", alias = "K")]
        k: usize,
    },
}

impl OperatorSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("operator spec serializes")
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OperatorSpec::Identity => "identity",
            OperatorSpec::MaskBox { .. } => "mask_box",
            OperatorSpec::MaskRandom { .. } => "mask_random",
            OperatorSpec::Downsample { .. } => "downsample",
            OperatorSpec::TruncateGain { .. } => "truncate_gain",
            OperatorSpec::QuantizeAoa { .. } => "quantize_aoa",
            OperatorSpec::Jtqr { .. } => "jtqr",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            OperatorSpec::Identity
                | OperatorSpec::MaskBox { .. }
                | OperatorSpec::MaskRandom { .. }
                | OperatorSpec::Downsample { .. }
        )
    }

    /// Whether the operator depends on the building layout.
    pub fn uses_building(&self) -> bool {
        self.sectors().is_some()
    }

    fn truncation(&self) -> Option<(f64, f64)> {
        match *self {
            OperatorSpec::TruncateGain { a, b } | OperatorSpec::Jtqr { a, b, .. } => Some((a, b)),
            _ => None,
        }
    }

    fn sectors(&self) -> Option<usize> {
        match *self {
            OperatorSpec::QuantizeAoa { k } | OperatorSpec::Jtqr { k, .. } => Some(k),
            _ => None,
        }
    }
}

/// An operator bound to a grid shape and, where needed, a building layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOperator {
    spec: OperatorSpec,
    shape: Shape,
    observed: Option<Vec<bool>>,
    building: Vec<bool>,
    quantizer: Option<AoaQuantizer>,
}

impl ForwardOperator {
    /// Binds `spec` to inputs of `shape`; `building` marks building cells (row-major, one per cell).
    pub fn new(spec: OperatorSpec, shape: Shape, building: Option<&[bool]>) -> Result<Self> {
        let cells = shape.height * shape.width;
        let building = match building {
            Some(b) if b.len() != cells => {
                return Err(CkmError::invalid(format!(
                    "building mask has {} cells, grid has {cells}",
                    b.len()
                )))
            }
            Some(b) => b.to_vec(),
            None => vec![false; cells],
        };
        if (spec.truncation().is_some() || spec.sectors().is_some()) && shape.channels != 2 {
            return Err(CkmError::invalid(format!(
                "{} needs a 2-channel input, got {shape}",
                spec.kind()
            )));
        }
        let mut observed = None;
        match spec {
            OperatorSpec::Identity => {}
            OperatorSpec::MaskBox {
                top,
                left,
                height,
                width,
            } => {
                if top + height > shape.height || left + width > shape.width {
                    return Err(CkmError::invalid(format!(
                        "box {height}x{width} at ({top}, {left}) exceeds {}x{} grid",
                        shape.height, shape.width
                    )));
                }
                let mut m = vec![true; cells];
                for r in top..top + height {
                    m[r * shape.width + left..r * shape.width + left + width].fill(false);
                }
                observed = Some(m);
            }
            OperatorSpec::MaskRandom { ratio, seed } => {
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(CkmError::invalid(format!(
                        "mask ratio {ratio} outside [0, 1]"
                    )));
                }
                let n = ((ratio * cells as f64).floor() as usize).min(cells);
                let mut m = vec![true; cells];
                for k in sample(&mut ChaCha8Rng::seed_from_u64(seed), cells, n) {
                    m[k] = false;
                }
                observed = Some(m);
            }
            OperatorSpec::Downsample { factor }
                if (factor == 0
                    || !shape.height.is_multiple_of(factor)
                    || !shape.width.is_multiple_of(factor)) =>
            {
                return Err(CkmError::invalid(format!(
                    "{}x{} grid is not divisible by factor {factor}",
                    shape.height, shape.width
                )));
            }
            _ => {}
        }
        if let Some((a, b)) = spec.truncation() {
            if !(0.0 <= a && a < b && b <= 1.0) {
                return Err(CkmError::invalid(format!(
                    "truncation bounds need 0 <= a < b <= 1, got a={a}, b={b}"
                )));
            }
        }
        let quantizer = spec.sectors().map(AoaQuantizer::new).transpose()?;
        Ok(ForwardOperator {
            spec,
            shape,
            observed,
            building,
            quantizer,
        })
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.shape
    }

    pub fn output_shape(&self) -> Shape {
        match self.spec {
            OperatorSpec::Downsample { factor } => Shape::new(
                self.shape.channels,
                self.shape.height / factor,
                self.shape.width / factor,
            ),
            _ => self.shape,
        }
    }

    /// Per-cell observation pattern of masking operators.
    pub fn observed_mask(&self) -> Option<&[bool]> {
        self.observed.as_deref()
    }

    pub fn building(&self) -> &[bool] {
        &self.building
    }

    pub fn quantizer(&self) -> Option<&AoaQuantizer> {
        self.quantizer.as_ref()
    }

    pub fn is_linear(&self) -> bool {
        self.spec.is_linear()
    }

    pub fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        CkmError::check_shape(self.shape, x.shape())?;
        if let OperatorSpec::Downsample { factor } = self.spec {
            return Ok(self.block_mean(x, factor));
        }
        let mut y = x.clone();
        if let Some(obs) = &self.observed {
            for c in 0..self.shape.channels {
                for (v, &o) in y.channel_mut(c).iter_mut().zip(obs) {
                    if !o {
                        *v = 0.0;
                    }
                }
            }
        }
        if let Some((a, b)) = self.spec.truncation() {
            for v in y.channel_mut(GAIN) {
                *v = v.clamp(a as f32, b as f32);
            }
        }
        if let Some(q) = &self.quantizer {
            for (v, &bld) in y.channel_mut(AOA).iter_mut().zip(&self.building) {
                *v = if bld { 0.0 } else { q.quantize_pixel(*v) };
            }
        }
        Ok(y)
    }

    /// `cotangentᵀ·∂A/∂x` at `x`; the quantizer uses the straight-through estimator.
    pub fn vjp(&self, x: &Tensor<f32>, cotangent: &Tensor<f32>) -> Result<Tensor<f32>> {
        CkmError::check_shape(self.shape, x.shape())?;
        CkmError::check_shape(self.output_shape(), cotangent.shape())?;
        if let OperatorSpec::Downsample { factor } = self.spec {
            return Ok(self.block_spread(cotangent, factor));
        }
        let mut g = cotangent.clone();
        if let Some(obs) = &self.observed {
            for c in 0..self.shape.channels {
                for (v, &o) in g.channel_mut(c).iter_mut().zip(obs) {
                    if !o {
                        *v = 0.0;
                    }
                }
            }
        }
        if let Some((a, b)) = self.spec.truncation() {
            let (a, b) = (a as f32, b as f32);
            for (v, &xv) in g.channel_mut(GAIN).iter_mut().zip(x.channel(GAIN)) {
                if !(a < xv && xv < b) {
                    *v = 0.0;
                }
            }
        }
        if self.quantizer.is_some() {
            for (v, &bld) in g.channel_mut(AOA).iter_mut().zip(&self.building) {
                if bld {
                    *v = 0.0;
                }
            }
        }
        Ok(g)
    }

    /// Strict check that every non-building AoA pixel is a valid encoding; needed only for the quantizer.
    pub fn validate_input(&self, x: &Tensor<f32>) -> Result<()> {
        CkmError::check_shape(self.shape, x.shape())?;
        if self.quantizer.is_none() {
            return Ok(());
        }
        for (k, (&p, &bld)) in x.channel(AOA).iter().zip(&self.building).enumerate() {
            if !bld {
                encoding::pixel_to_aoa_sine(p as f64)
                    .map_err(|e| CkmError::Encoding(format!("cell {k}: {e}")))?;
            }
        }
        Ok(())
    }

    fn block_mean(&self, x: &Tensor<f32>, s: usize) -> Tensor<f32> {
        let out = self.output_shape();
        let inv = 1.0 / (s * s) as f64;
        Tensor::from_fn(out, |c, y, xx| {
            let mut acc = 0.0f64;
            for dy in 0..s {
                for dx in 0..s {
                    acc += x.get(c, y * s + dy, xx * s + dx) as f64;
                }
            }
            (acc * inv) as f32
        })
    }

    fn block_spread(&self, c: &Tensor<f32>, s: usize) -> Tensor<f32> {
        let inv = 1.0 / (s * s) as f32;
        Tensor::from_fn(self.shape, |ch, y, x| c.get(ch, y / s, x / s) * inv)
    }
}
