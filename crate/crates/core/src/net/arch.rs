//! Architecture description and the flat parameter layout derived from it.

use std::fmt;
use std::str::FromStr;

use crate::error::{CkmError, Result};

/// Hyperparameters of the U-Net score model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub base_width: usize,
    /// Channel multiplier per resolution, finest first.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    pub temb_dim: usize,
    pub channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_width: 32,
            channel_mults: vec![1, 2, 2],
            groups: 8,
            temb_dim: 64,
            channels: 2,
        }
    }
}

impl ArchConfig {
    pub fn with_width(base_width: usize) -> Self {
        ArchConfig {
            base_width,
            groups: (base_width / 4).clamp(1, 8),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.channels == 0 || self.channel_mults.is_empty() {
            return Err(CkmError::invalid(
                "architecture needs positive width, channels and at least one level",
            ));
        }
        if self.temb_dim < 2 || !self.temb_dim.is_multiple_of(2) {
            return Err(CkmError::invalid(format!(
                "time embedding dim must be even, got {}",
                self.temb_dim
            )));
        }
        for &m in &self.channel_mults {
            let c = self.base_width * m;
            if m == 0 || self.groups == 0 || !c.is_multiple_of(self.groups) {
                return Err(CkmError::invalid(format!(
                    "{c} channels not divisible into {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Spatial dimensions must be divisible by this factor.
    pub fn spatial_factor(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }
}

/// Compact descriptor string, e.g. `unet(w=32,m=1-2-2,g=8,t=64)`.
impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mults: Vec<String> = self.channel_mults.iter().map(|m| m.to_string()).collect();
        write!(
            f,
            "unet(w={},m={},g={},t={})",
            self.base_width,
            mults.join("-"),
            self.groups,
            self.temb_dim
        )
    }
}

impl FromStr for ArchConfig {
    type Err = CkmError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CkmError::format(format!("unrecognized architecture descriptor {s:?}"));
        let inner = s
            .strip_prefix("unet(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let mut cfg = ArchConfig {
            channel_mults: Vec::new(),
            ..Default::default()
        };
        let (mut seen_w, mut seen_m, mut seen_g, mut seen_t) = (false, false, false, false);
        for kv in inner.split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
            match k {
                "w" => (cfg.base_width, seen_w) = (num(v)?, true),
                "g" => (cfg.groups, seen_g) = (num(v)?, true),
                "t" => (cfg.temb_dim, seen_t) = (num(v)?, true),
                "m" => {
                    cfg.channel_mults = v.split('-').map(num).collect::<Result<_>>()?;
                    seen_m = true;
                }
                _ => return Err(bad()),
            }
        }
        if !(seen_w && seen_m && seen_g && seen_t) {
            return Err(bad());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Name, shape and position of one parameter tensor in the flat buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    /// Kernel side: 3 or 1.
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

/// conv → group norm → time scale/shift → SiLU.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Unit {
    pub conv: Conv,
    pub norm: Norm,
    pub emb: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Block {
    pub u1: Unit,
    pub u2: Unit,
    pub skip: Option<Conv>,
    pub cin: usize,
    pub cout: usize,
}

/// Offsets of every layer inside the flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub n_params: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub in_conv: Conv,
    pub down: Vec<Block>,
    pub up: Vec<Block>,
    pub out_conv: Conv,
}

/// How each tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with std `1/√fan_in`.
    Fan(usize),
    Zero,
    One,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    inits: Vec<Init>,
    n: usize,
}

impl Builder {
    fn push(&mut self, name: String, dims: Vec<usize>, init: Init) -> usize {
        let offset = self.n;
        self.n += dims.iter().product::<usize>();
        self.tensors.push(TensorInfo { name, dims, offset });
        self.inits.push(init);
        offset
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize, zero: bool) -> Linear {
        let init = if zero { Init::Zero } else { Init::Fan(n_in) };
        let w = self.push(format!("{name}.weight"), vec![n_out, n_in], init);
        let b = self.push(format!("{name}.bias"), vec![n_out], Init::Zero);
        Linear { w, b, n_in, n_out }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv {
        let init = if zero {
            Init::Zero
        } else {
            Init::Fan(cin * k * k)
        };
        let w = self.push(format!("{name}.weight"), vec![cout, cin, k, k], init);
        let b = self.push(format!("{name}.bias"), vec![cout], Init::Zero);
        Conv { w, b, cin, cout, k }
    }

    fn unit(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> Unit {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, false);
        let gamma = self.push(format!("{name}.norm.weight"), vec![cout], Init::One);
        let beta = self.push(format!("{name}.norm.bias"), vec![cout], Init::Zero);
        let emb = self.linear(&format!("{name}.emb"), temb, 2 * cout, true);
        Unit {
            conv,
            norm: Norm { gamma, beta },
            emb,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> Block {
        let u1 = self.unit(&format!("{name}.unit1"), cin, cout, temb);
        let u2 = self.unit(&format!("{name}.unit2"), cout, cout, temb);
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false));
        Block {
            u1,
            u2,
            skip,
            cin,
            cout,
        }
    }
}

impl Layout {
    pub(crate) fn build(cfg: &ArchConfig) -> (Layout, Vec<Init>) {
        let mut b = Builder {
            tensors: Vec::new(),
            inits: Vec::new(),
            n: 0,
        };
        let t = cfg.temb_dim;
        let fc1 = b.linear("time.fc1", t, t, false);
        let fc2 = b.linear("time.fc2", t, t, false);
        let w = cfg.base_width;
        let in_conv = b.conv("in_conv", cfg.channels, w, 3, false);
        let levels = cfg.channel_mults.len();
        let mut down = Vec::with_capacity(levels);
        let mut prev = w;
        for l in 0..levels {
            let c = cfg.level_width(l);
            down.push(b.block(&format!("down.{l}"), prev, c, t));
            prev = c;
        }
        let mut up = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            let c = cfg.level_width(l);
            up.push(b.block(&format!("up.{l}"), prev + c, c, t));
            prev = c;
        }
        let out_conv = b.conv("out_conv", w, cfg.channels, 3, true);
        let layout = Layout {
            tensors: b.tensors,
            n_params: b.n,
            fc1,
            fc2,
            in_conv,
            down,
            up,
            out_conv,
        };
        (layout, b.inits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_round_trip() {
        let cfg = ArchConfig::default();
        assert_eq!(cfg.to_string(), "unet(w=32,m=1-2-2,g=8,t=64)");
        assert_eq!(cfg.to_string().parse::<ArchConfig>().unwrap(), cfg);
        assert!("unet(w=32,m=1-2-2,g=8)".parse::<ArchConfig>().is_err());
        assert!("resnet(w=32)".parse::<ArchConfig>().is_err());
        assert!("unet(w=30,m=1-2-2,g=8,t=64)".parse::<ArchConfig>().is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let (layout, inits) = Layout::build(&ArchConfig::default());
        assert_eq!(inits.len(), layout.tensors.len());
        let mut next = 0;
        for t in &layout.tensors {
            assert_eq!(t.offset, next, "{}", t.name);
            next += t.len();
        }
        assert_eq!(next, layout.n_params);
        assert_eq!(layout.up[1].cin, 96);
        assert!(layout.down[0].skip.is_none());
        assert_eq!(layout.out_conv.cout, 2);
    }
}
