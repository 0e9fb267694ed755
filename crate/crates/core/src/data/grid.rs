use std::fs;
use std::path::Path;

use crate::data::encoding::{is_valid_aoa_pixel, AOA_PIXEL_MIN};
use crate::error::{CkmError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::{Shape, Tensor};

pub const CKMG_MAGIC: &[u8; 4] = b"CKMG";
pub const CKMG_VERSION: u16 = 1;
const CKMG_CHANNELS: u16 = 3;
const FLAG_BS: u8 = 0x01;

/// Channel index of the gain plane in the two-channel model tensor.
pub const GAIN: usize = 0;
/// Channel index of the AoA-sine plane in the two-channel model tensor.
pub const AOA: usize = 1;

/// Pixel-encoded channel knowledge map over an `H×W` grid.
///
/// Invariants (checked by every constructor):
/// * gain pixels lie in `[0, 1]` and are exactly 0 on building cells;
/// * AoA-sine pixels are exactly 0 on building cells and in `[0.3, 1]` elsewhere;
/// * the base station, when present, sits on a free cell inside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CkmGrid {
    height: usize,
    width: usize,
    gain: Vec<f32>,
    aoa_sine: Vec<f32>,
    building: Vec<bool>,
    bs: Option<(usize, usize)>,
}

impl CkmGrid {
    pub fn new(
        height: usize,
        width: usize,
        gain: Vec<f32>,
        aoa_sine: Vec<f32>,
        building: Vec<bool>,
        bs: Option<(usize, usize)>,
    ) -> Result<Self> {
        let grid = CkmGrid {
            height,
            width,
            gain,
            aoa_sine,
            building,
            bs,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if n == 0 {
            return Err(CkmError::invalid("grid must be non-empty"));
        }
        if self.gain.len() != n || self.aoa_sine.len() != n || self.building.len() != n {
            return Err(CkmError::invalid("channel lengths do not match grid size"));
        }
        for idx in 0..n {
            let (g, a, b) = (self.gain[idx], self.aoa_sine[idx], self.building[idx]);
            let (row, col) = (idx / self.width, idx % self.width);
            if !(0.0..=1.0).contains(&g) {
                return Err(CkmError::Encoding(format!(
                    "gain pixel {g} at ({row},{col}) outside [0, 1]"
                )));
            }
            if b {
                if g != 0.0 || a != 0.0 {
                    return Err(CkmError::Encoding(format!(
                        "building cell ({row},{col}) must be 0 in both channels"
                    )));
                }
            } else if a == 0.0 || !is_valid_aoa_pixel(a as f64) {
                return Err(CkmError::Encoding(format!(
                    "AoA pixel {a} at free cell ({row},{col}) outside [{AOA_PIXEL_MIN}, 1]"
                )));
            }
        }
        if let Some((r, c)) = self.bs {
            if r >= self.height || c >= self.width {
                return Err(CkmError::invalid(format!(
                    "base station ({r},{c}) outside grid"
                )));
            }
            if self.building[r * self.width + c] {
                return Err(CkmError::invalid(format!(
                    "base station ({r},{c}) on a building"
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gain(&self) -> &[f32] {
        &self.gain
    }

    pub fn aoa_sine(&self) -> &[f32] {
        &self.aoa_sine
    }

    pub fn building(&self) -> &[bool] {
        &self.building
    }

    pub fn base_station(&self) -> Option<(usize, usize)> {
        self.bs
    }

    /// Shape of the two-channel tensor seen by the model.
    pub fn data_shape(&self) -> Shape {
        Shape::new(2, self.height, self.width)
    }

    /// Gain and AoA-sine planes stacked as a `2×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.gain.len());
        data.extend_from_slice(&self.gain);
        data.extend_from_slice(&self.aoa_sine);
        Tensor::from_vec(self.data_shape(), data).expect("shape matches by construction")
    }

    /// Projects an arbitrary two-channel estimate onto the set of valid grids.
    ///
    /// With a known building mask the building cells are zeroed; otherwise a
    /// cell whose AoA pixel falls below the middle of the encoding gap (0.15)
    /// is taken to be a building. Free cells get gain clamped to `[0, 1]` and
    /// AoA clamped to `[0.3, 1]`.
    pub fn from_tensor_projected(t: &Tensor<f32>, building: Option<&[bool]>) -> Result<Self> {
        let shape = t.shape();
        if shape.channels != 2 {
            return Err(CkmError::invalid(format!(
                "expected 2 channels, got {}",
                shape.channels
            )));
        }
        let n = shape.plane();
        if let Some(b) = building {
            if b.len() != n {
                return Err(CkmError::invalid(
                    "building mask size does not match tensor",
                ));
            }
        }
        let (gain_in, aoa_in) = (t.channel(GAIN), t.channel(AOA));
        let mut gain = vec![0.0f32; n];
        let mut aoa = vec![0.0f32; n];
        let mut bmask = vec![false; n];
        for idx in 0..n {
            let is_building = match building {
                Some(b) => b[idx],
                None => !(aoa_in[idx] >= 0.15),
            };
            bmask[idx] = is_building;
            if !is_building {
                gain[idx] = if gain_in[idx].is_nan() {
                    0.0
                } else {
                    gain_in[idx].clamp(0.0, 1.0)
                };
                aoa[idx] = aoa_in[idx].clamp(AOA_PIXEL_MIN as f32, 1.0);
            }
        }
        CkmGrid::new(shape.height, shape.width, gain, aoa, bmask, None)
    }

    pub fn with_base_station(mut self, bs: Option<(usize, usize)>) -> Result<Self> {
        self.bs = bs;
        self.validate()?;
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.gain.len();
        let mut w = ByteWriter::with_capacity(32 + 9 * n);
        w.bytes(CKMG_MAGIC);
        w.u16(CKMG_VERSION);
        w.u16(CKMG_CHANNELS);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        match self.bs {
            Some((r, c)) => {
                w.u8(FLAG_BS);
                w.u32(r as u32);
                w.u32(c as u32);
            }
            None => w.u8(0),
        }
        self.gain.iter().for_each(|&v| w.f32(v));
        self.aoa_sine.iter().for_each(|&v| w.f32(v));
        self.building.iter().for_each(|&b| w.u8(b as u8));
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_crc_trailer(bytes)?;
        if r.take(4)? != CKMG_MAGIC {
            return Err(CkmError::format("bad magic, not a CKMG file"));
        }
        let version = r.u16()?;
        if version != CKMG_VERSION {
            return Err(CkmError::format(format!(
                "unsupported CKMG version {version}"
            )));
        }
        let channels = r.u16()?;
        if channels != CKMG_CHANNELS {
            return Err(CkmError::format(format!(
                "expected 3 channels, found {channels}"
            )));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let flags = r.u8()?;
        let bs = if flags & FLAG_BS != 0 {
            Some((r.u32()? as usize, r.u32()? as usize))
        } else {
            None
        };
        let n = height
            .checked_mul(width)
            .filter(|&n| n <= r.remaining())
            .ok_or_else(|| CkmError::format("truncated CKMG file"))?;
        let gain = r.f32_vec(n)?;
        let aoa_sine = r.f32_vec(n)?;
        let building = r.take(n)?.iter().map(|&b| b != 0).collect();
        r.expect_end()?;
        CkmGrid::new(height, width, gain, aoa_sine, building, bs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
