//! Degraded observations `y = A(x) + n` and their CKMO file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CkmGrid;
use crate::error::{CkmError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::ops::{ForwardOperator, OperatorSpec};
use crate::tensor::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CKMO_MAGIC: &[u8; 4] = b"CKMO";
pub const CKMO_VERSION: u16 = 1;

/// Pixel-domain noise level used throughout the experiments.
pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    y: Tensor<f32>,
    operator: ForwardOperator,
    sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    operator: OperatorSpec,
    sigma: f64,
    input: Shape,
    output: Shape,
}

impl Observation {
    pub fn new(y: Tensor<f32>, operator: ForwardOperator, sigma: f64) -> Result<Self> {
        CkmError::check_shape(operator.output_shape(), y.shape())?;
        if !(sigma >= 0.0) {
            return Err(CkmError::invalid(format!(
                "noise level must be non-negative, got {sigma}"
            )));
        }
        Ok(Observation { y, operator, sigma })
    }

    pub fn y(&self) -> &Tensor<f32> {
        &self.y
    }

    pub fn operator(&self) -> &ForwardOperator {
        &self.operator
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            operator: self.operator.spec().clone(),
            sigma: self.sigma,
            input: self.operator.input_shape(),
            output: self.y.shape(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let building = self.operator.building();
        let mut w =
            ByteWriter::with_capacity(32 + header.len() + building.len() + 4 * self.y.len());
        w.bytes(CKMO_MAGIC);
        w.u16(CKMO_VERSION);
        w.u32(header.len() as u32);
        w.bytes(&header);
        if building.iter().any(|&b| b) {
            w.u8(1);
            for &b in building {
                w.u8(b as u8);
            }
        } else {
            w.u8(0);
        }
        for &v in self.y.data() {
            w.f32(v);
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_crc_trailer(bytes)?;
        if r.take(4)? != CKMO_MAGIC {
            return Err(CkmError::format("bad magic, not a CKMO file"));
        }
        let version = r.u16()?;
        if version != CKMO_VERSION {
            return Err(CkmError::format(format!(
                "unsupported CKMO version {version}"
            )));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| CkmError::format(format!("bad observation header: {e}")))?;
        let cells = header.input.height * header.input.width;
        let building = match r.u8()? {
            0 => None,
            1 => Some(
                r.take(cells)?
                    .iter()
                    .map(|&b| b != 0)
                    .collect::<Vec<bool>>(),
            ),
            f => return Err(CkmError::format(format!("bad building flag {f}"))),
        };
        let operator = ForwardOperator::new(header.operator, header.input, building.as_deref())?;
        if operator.output_shape() != header.output {
            return Err(CkmError::format(format!(
                "header output shape {} disagrees with operator output {}",
                header.output,
                operator.output_shape()
            )));
        }
        let y = Tensor::from_vec(header.output, r.f32_vec(header.output.len())?)?;
        r.expect_end()?;
        Observation::new(y, operator, header.sigma)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Builds the operator for `grid` and draws `y = A(x) + σ·z` with seeded noise.
///
/// Noise is added only where something is observed: cells hidden by a mask
/// stay exactly 0.
pub fn observe(grid: &CkmGrid, spec: &OperatorSpec, sigma: f64, seed: u64) -> Result<Observation> {
    let x = grid.to_tensor();
    let building = spec.uses_building().then(|| grid.building());
    let operator = ForwardOperator::new(spec.clone(), x.shape(), building)?;
    observe_tensor(&x, operator, sigma, seed)
}

/// [`observe`] for a bare tensor and an already bound operator.
pub fn observe_tensor(
    x: &Tensor<f32>,
    operator: ForwardOperator,
    sigma: f64,
    seed: u64,
) -> Result<Observation> {
    if !(sigma >= 0.0) {
        return Err(CkmError::invalid(format!(
            "noise level must be non-negative, got {sigma}"
        )));
    }
    let mut y = operator.apply(x)?;
    if sigma > 0.0 {
        let z: Tensor<f32> =
            Tensor::standard_normal(y.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
        let hw = y.shape().height * y.shape().width;
        let observed = operator.observed_mask();
        for (k, (v, zv)) in y.data_mut().iter_mut().zip(z.data()).enumerate() {
            if observed.is_none_or(|m| m[k % hw]) {
                *v = (*v as f64 + sigma * *zv as f64) as f32;
            }
        }
    }
    Observation::new(y, operator, sigma)
}
