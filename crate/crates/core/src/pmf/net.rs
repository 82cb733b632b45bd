//! x-prediction network: a U-Net over frames-as-channels with
//! spatio-temporal attention, additive condition fusion and a
//! scale-and-normalize time embedding of `(t, r)`.

#[allow(unused_imports)] // float math without std
use num_traits::Float;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::XPredictor;
use crate::dual::{self, Dual};
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::kancondnet::ConditionSet;
use crate::nn::{Conv2d, ConvTranspose2, GroupNorm, Init, Linear, SpatioTemporalAttention};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XPredNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub norm_groups: usize,
    /// Spatio-temporal attention after the residual blocks of every level.
    pub attention: bool,
    /// Per-frame channel width inside temporal attention.
    pub head_dim: usize,
    /// Sinusoid width per time variable.
    pub time_embed_dim: usize,
    pub time_embed_scale: f64,
    pub time_embed_renorm: f64,
}

impl Default for XPredNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: alloc::vec![1, 2, 4, 8],
            blocks_per_level: 2,
            norm_groups: 8,
            attention: true,
            head_dim: 4,
            time_embed_dim: 32,
            time_embed_scale: 1000.0,
            time_embed_renorm: 1000.0,
        }
    }
}

impl XPredNetConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.channel_multipliers;
        if m.is_empty() || m.windows(2).any(|w| w[0] >= w[1]) || m[0] == 0 {
            bail!(Config, "channel multipliers {:?} must be positive and strictly increasing", m);
        }
        if self.base_channels == 0 || self.norm_groups == 0 || self.blocks_per_level == 0 {
            bail!(Config, "base_channels, norm_groups and blocks_per_level must be >= 1");
        }
        for &k in m {
            if !(self.base_channels * k).is_multiple_of(self.norm_groups) {
                bail!(Config, "norm_groups {} does not divide width {}", self.norm_groups, self.base_channels * k);
            }
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            bail!(Config, "time_embed_dim must be even and >= 2, got {}", self.time_embed_dim);
        }
        if !(self.time_embed_scale > 0.0 && self.time_embed_renorm > 0.0) {
            bail!(Config, "time embedding scale and renorm must be positive");
        }
        if self.attention && self.head_dim == 0 {
            bail!(Config, "head_dim must be >= 1 when attention is enabled");
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }
}

/// Sinusoid of `value * scale` divided by `renorm`, `[sin..., cos...]`, with
/// its derivative with respect to `value`.
pub fn sinusoid(value: f64, cfg: &XPredNetConfig) -> (Vec<f64>, Vec<f64>) {
    let half = cfg.time_embed_dim / 2;
    let s = value * cfg.time_embed_scale;
    let k = cfg.time_embed_scale / cfg.time_embed_renorm;
    let mut e = Vec::with_capacity(2 * half);
    let mut d = Vec::with_capacity(2 * half);
    let freq = |i: usize| (-(10000f64).ln() * i as f64 / half as f64).exp();
    for i in 0..half {
        e.push((s * freq(i)).sin() / cfg.time_embed_renorm);
        d.push(k * freq(i) * (s * freq(i)).cos());
    }
    for i in 0..half {
        e.push((s * freq(i)).cos() / cfg.time_embed_renorm);
        d.push(-k * freq(i) * (s * freq(i)).sin());
    }
    (e, d)
}

/// Concatenated `[sinusoid(t), sinusoid(r)]` before the learned map.
pub fn sinusoid_pair(t: f64, r: f64, cfg: &XPredNetConfig) -> Vec<f64> {
    let mut e = sinusoid(t, cfg).0;
    e.extend(sinusoid(r, cfg).0);
    e
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<S: Real>(mut init: Init<'_, S>, cin: usize, cout: usize, emb: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(init.sub("norm1"), groups, cin),
            conv1: Conv2d::new(init.sub("conv1"), cin, cout, 3, 1),
            time: Linear::new(init.sub("time"), emb, cout),
            norm2: GroupNorm::new(init.sub("norm2"), groups, cout),
            conv2: Conv2d::new(init.sub("conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::pointwise(init.sub("skip"), cin, cout, true)),
        }
    }

    fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual, emb: Dual) -> Result<Dual> {
        let h = self.conv1.forward(g, dual::silu(g, self.norm1.forward(g, x)?)?)?;
        let h = dual::add_channel(g, h, self.time.forward(g, dual::silu(g, emb)?)?)?;
        let h = self.conv2.forward(g, dual::silu(g, self.norm2.forward(g, h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        dual::add(g, skip, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResBlock>,
    attn: Option<SpatioTemporalAttention>,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Real>(mut init: Init<'_, S>, cfg: &XPredNetConfig, cin: usize, c: usize, emb: usize, frames: usize) -> Self {
        let blocks = (0..cfg.blocks_per_level)
            .map(|i| ResBlock::new(init.sub(&format!("res{i}")), if i == 0 { cin } else { c }, c, emb, cfg.norm_groups))
            .collect();
        let attn = cfg.attention.then(|| SpatioTemporalAttention::new(init.sub("attn"), c, cfg.norm_groups, frames, cfg.head_dim));
        Self { blocks, attn }
    }

    fn forward<S: Real>(&self, g: &Graph<'_, S>, mut x: Dual, emb: Dual) -> Result<Dual> {
        for b in &self.blocks {
            x = b.forward(g, x, emb)?;
        }
        match &self.attn {
            Some(a) => a.forward(g, x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct XPredNet {
    pub config: XPredNetConfig,
    frames: usize,
    channels: usize,
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    fuse: Vec<Conv2d>,
    down: Vec<(Stage, Conv2d)>,
    middle: Stage,
    up: Vec<(ConvTranspose2, Stage)>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl XPredNet {
    /// `frames * channels` is the width of `Z_t`; `cond_channels` are the
    /// widths of the condition maps, one per level.
    pub fn new<S: Real>(
        mut init: Init<'_, S>,
        cfg: &XPredNetConfig,
        frames: usize,
        channels: usize,
        cond_channels: &[usize],
    ) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        if cond_channels.len() != widths.len() {
            bail!(Config, "{} condition maps for a {}-level x-prediction net", cond_channels.len(), widths.len());
        }
        let emb = 4 * cfg.base_channels;
        let levels = widths.len();
        let time1 = Linear::new(init.sub("time1"), 2 * cfg.time_embed_dim, emb);
        let time2 = Linear::new(init.sub("time2"), emb, emb);
        let input = Conv2d::new(init.sub("input"), frames * channels, widths[0], 3, 1);
        let fuse = cond_channels
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(l, (&cc, &w))| Conv2d::pointwise(init.sub(&format!("fuse{l}")), cc, w, true))
            .collect();
        let down = (0..levels - 1)
            .map(|l| {
                let stage = Stage::new(init.sub(&format!("down{l}")), cfg, widths[l], widths[l], emb, frames);
                let ds = Conv2d::new(init.sub(&format!("down{l}.downsample")), widths[l], widths[l + 1], 3, 2);
                (stage, ds)
            })
            .collect();
        let middle = Stage::new(init.sub("middle"), cfg, widths[levels - 1], widths[levels - 1], emb, frames);
        let up = (0..levels - 1)
            .rev()
            .map(|l| {
                let us = ConvTranspose2::new(init.sub(&format!("up{l}.upsample")), widths[l + 1], widths[l]);
                (us, Stage::new(init.sub(&format!("up{l}")), cfg, 2 * widths[l], widths[l], emb, frames))
            })
            .collect();
        let out_norm = GroupNorm::new(init.sub("out_norm"), cfg.norm_groups, widths[0]);
        let out_conv = Conv2d::zeroed(init.sub("out_conv"), widths[0], frames * channels, 3);
        Ok(Self { config: cfg.clone(), frames, channels, time1, time2, input, fuse, down, middle, up, out_norm, out_conv })
    }

    /// Learned embedding `[n, 4 * base]` of per-sample `(t, r)`. With `jvp`
    /// the tangent is the derivative along `dt = 1, dr = 0`.
    pub fn time_embed<S: Real>(&self, g: &Graph<'_, S>, t: &[f64], r: &[f64], jvp: bool) -> Result<Dual> {
        if t.len() != r.len() {
            bail!(Shape, "{} t values for {} r values", t.len(), r.len());
        }
        let d = self.config.time_embed_dim;
        let mut val = Vec::with_capacity(t.len() * 2 * d);
        let mut tan = Vec::with_capacity(t.len() * 2 * d);
        for (&ti, &ri) in t.iter().zip(r) {
            let (e, de) = sinusoid(ti, &self.config);
            val.extend(e.iter().chain(&sinusoid(ri, &self.config).0).map(|&v| S::of(v)));
            tan.extend(de.iter().map(|&v| S::of(v)));
            tan.extend((0..d).map(|_| S::zero()));
        }
        let p = g.constant(Tensor::new(&[t.len(), 2 * d], val)?);
        let e = if jvp { Dual::new(p, g.constant(Tensor::new(&[t.len(), 2 * d], tan)?)) } else { Dual::constant(p) };
        let h = dual::silu(g, self.time1.forward(g, e)?)?;
        self.time2.forward(g, h)
    }
}

impl<S: Real> XPredictor<S> for XPredNet {
    fn forward(&self, g: &Graph<'_, S>, z: Dual, t: &[f64], r: &[f64], cond: &ConditionSet, jvp: bool) -> Result<Dual> {
        let s = g.shape(z.p);
        if s.len() != 4 || s[1] != self.frames * self.channels {
            bail!(Shape, "x-prediction expects [n, {}, H, W], got {:?}", self.frames * self.channels, s);
        }
        if s[0] != t.len() {
            bail!(Shape, "batch of {} with {} time values", s[0], t.len());
        }
        let levels = self.fuse.len();
        if cond.maps.len() != levels {
            bail!(Config, "{} condition maps for {} levels", cond.maps.len(), levels);
        }
        for (l, &m) in cond.maps.iter().enumerate() {
            let ms = g.shape(m);
            let res = (s[2] >> l, s[3] >> l);
            if ms.len() != 4 || ms[0] != s[0] || (ms[2], ms[3]) != res || !s[2].is_multiple_of(1 << (levels - 1)) {
                bail!(Config, "condition map {} has shape {:?}, level resolution is {:?}", l + 1, ms, res);
            }
        }
        let emb = self.time_embed(g, t, r, jvp)?;
        let fused = |l: usize, x: Dual| -> Result<Dual> { dual::add(g, x, self.fuse[l].forward(g, Dual::constant(cond.maps[l]))?) };

        let mut x = fused(0, self.input.forward(g, z)?)?;
        let mut skips = Vec::with_capacity(levels - 1);
        for (l, (stage, ds)) in self.down.iter().enumerate() {
            x = stage.forward(g, x, emb)?;
            skips.push(x);
            x = fused(l + 1, ds.forward(g, x)?)?;
        }
        x = self.middle.forward(g, x, emb)?;
        for (us, stage) in &self.up {
            let up = us.forward(g, x)?;
            let skip = skips.pop().expect("one skip per level");
            x = stage.forward(g, dual::concat(g, &[up, skip], 1)?, emb)?;
        }
        let h = dual::silu(g, self.out_norm.forward(g, x)?)?;
        self.out_conv.forward(g, h)
    }
}
