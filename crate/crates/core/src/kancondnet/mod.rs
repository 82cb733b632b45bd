//! Conditional encoder: multi-scale condition maps from the past frames and
//! the coarse forecast window, with ConvKAN blocks at the deepest level.

pub mod bspline;
pub mod convkan;
pub mod tcu;

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use bspline::BSplineBasis;
pub use convkan::ConvKan;
pub use tcu::Tcu;

use crate::dual::{self, Dual};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Init};
use crate::real::Real;

pub const LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KanPlacement {
    /// KAN residual blocks at the deepest level only.
    DeepOnly,
    /// KAN residual blocks at every level.
    Full,
    /// Plain residual blocks everywhere.
    None,
}

impl KanPlacement {
    fn uses_kan(self, level: usize) -> bool {
        match self {
            KanPlacement::DeepOnly => level == LEVELS - 1,
            KanPlacement::Full => true,
            KanPlacement::None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KanCondNetConfig {
    pub level_channels: Vec<usize>,
    pub kan_placement: KanPlacement,
    pub grid_size: usize,
    pub spline_order: usize,
    pub grid_range: (f64, f64),
}

impl Default for KanCondNetConfig {
    fn default() -> Self {
        Self {
            level_channels: vec![24, 48, 96, 192],
            kan_placement: KanPlacement::DeepOnly,
            grid_size: 3,
            spline_order: 2,
            grid_range: (-1.0, 1.0),
        }
    }
}

impl KanCondNetConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.level_channels.len() != LEVELS {
            bail!(Config, "kancondnet needs exactly {} levels, got {}", LEVELS, self.level_channels.len());
        }
        for &c in &self.level_channels {
            if c == 0 || c % frames != 0 {
                bail!(Config, "level width {} is not a positive multiple of the {}-frame window", c, frames);
            }
        }
        BSplineBasis::new(self.grid_size, self.spline_order, self.grid_range.0, self.grid_range.1)?;
        Ok(())
    }
}

/// Condition maps `h_1 .. h_4` at resolutions `R, R/2, R/4, R/8`, as nodes of
/// the graph that produced them.
#[derive(Clone, Debug)]
pub struct ConditionSet {
    pub maps: Vec<Var>,
}

/// `x + conv(silu(conv(x)))`.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<S: Real>(mut init: Init<'_, S>, c: usize) -> Self {
        Self { conv1: Conv2d::new(init.sub("conv1"), c, c, 3, 1), conv2: Conv2d::new(init.sub("conv2"), c, c, 3, 1) }
    }

    fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let h = self.conv1.forward(g, x)?;
        let h = self.conv2.forward(g, dual::silu(g, h)?)?;
        dual::add(g, x, h)
    }
}

/// Two ConvKAN layers with a 1x1 convolutional skip.
#[derive(Clone, Debug)]
struct KanResBlock {
    kan1: ConvKan,
    kan2: ConvKan,
    skip: Conv2d,
}

impl KanResBlock {
    fn new<S: Real>(mut init: Init<'_, S>, c: usize, basis: &Rc<BSplineBasis>) -> Self {
        Self {
            kan1: ConvKan::new(init.sub("kan1"), c, c, 3, basis.clone()),
            kan2: ConvKan::new(init.sub("kan2"), c, c, 3, basis.clone()),
            skip: Conv2d::pointwise(init.sub("skip"), c, c, true),
        }
    }

    fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let h = self.kan2.forward(g, self.kan1.forward(g, x)?)?;
        dual::add(g, self.skip.forward(g, x)?, h)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Plain(ResBlock),
    Kan(KanResBlock),
}

#[derive(Clone, Debug)]
struct Level {
    block: Block,
    tcu: Tcu,
    down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct KanCondNet {
    pub config: KanCondNetConfig,
    in_channels: usize,
    stem: Conv2d,
    levels: Vec<Level>,
}

impl KanCondNet {
    /// `in_channels` is `(T_in + T_window) * C`; `frames` is `T_window`, the
    /// number of temporal groups the TCUs mix over.
    pub fn new<S: Real>(mut init: Init<'_, S>, config: &KanCondNetConfig, in_channels: usize, frames: usize) -> Result<Self> {
        config.validate(frames)?;
        let basis = Rc::new(BSplineBasis::new(config.grid_size, config.spline_order, config.grid_range.0, config.grid_range.1)?);
        let ch = &config.level_channels;
        let stem = Conv2d::new(init.sub("stem"), in_channels, ch[0], 3, 1);
        let mut levels = Vec::with_capacity(LEVELS);
        for (l, &c) in ch.iter().enumerate() {
            let mut sub = init.sub(&format!("level{}", l + 1));
            let block = if config.kan_placement.uses_kan(l) {
                Block::Kan(KanResBlock::new(sub.sub("kanres"), c, &basis))
            } else {
                Block::Plain(ResBlock::new(sub.sub("res"), c))
            };
            let tcu = Tcu::new(sub.sub("tcu"), c, frames)?;
            let down = (l + 1 < LEVELS).then(|| Conv2d::new(sub.sub("down"), c, ch[l + 1], 3, 2));
            levels.push(Level { block, tcu, down });
        }
        Ok(Self { config: config.clone(), in_channels, stem, levels })
    }

    /// Conditions from `[n, (T_in + T_window) * C, R, R]` (past frames then
    /// the coarse window, frames as channels).
    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<ConditionSet> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            bail!(Shape, "kancondnet expects [n, {}, R, R], got {:?}", self.in_channels, s);
        }
        if s[2] != s[3] || !s[2].is_multiple_of(8) || s[2] == 0 {
            bail!(Config, "kancondnet resolution {}x{} must be square and divisible by 8", s[2], s[3]);
        }
        let mut h = self.stem.forward(g, Dual::constant(x))?;
        let mut maps = Vec::with_capacity(LEVELS);
        for level in &self.levels {
            h = match &level.block {
                Block::Plain(b) => b.forward(g, h)?,
                Block::Kan(b) => b.forward(g, h)?,
            };
            h = level.tcu.forward(g, h)?;
            maps.push(h.p);
            if let Some(down) = &level.down {
                h = down.forward(g, h)?;
            }
        }
        Ok(ConditionSet { maps })
    }
}
