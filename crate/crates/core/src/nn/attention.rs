//! Spatial and temporal self-attention on frames-as-channels feature maps.


#[allow(unused_imports)] // float math without std
use num_traits::Float;
use super::{Conv2d, GroupNorm, Init};
use crate::dual::{self, Dual};
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::real::Real;

/// Single-head attention across all `h * w` positions.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl SpatialAttention {
    pub fn new<S: Real>(mut init: Init<'_, S>, channels: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(init.sub("norm"), groups, channels),
            q: Conv2d::pointwise(init.sub("q"), channels, channels, true),
            k: Conv2d::pointwise(init.sub("k"), channels, channels, true),
            v: Conv2d::pointwise(init.sub("v"), channels, channels, true),
            proj: Conv2d::zeroed(init.sub("proj"), channels, channels, 1),
        }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let shape = g.shape(x.p);
        let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm.forward(g, x)?;
        let flat = |d: Dual| dual::reshape(g, d, &[n, c, l]);
        let q = flat(self.q.forward(g, h)?)?;
        let k = flat(self.k.forward(g, h)?)?;
        let v = flat(self.v.forward(g, h)?)?;
        let scores = dual::matmul(g, q, k, true, false)?;
        let scores = dual::scale(g, scores, S::of(1.0 / (c as f64).sqrt()));
        let attn = dual::softmax_last(g, scores)?;
        let out = dual::matmul(g, v, attn, false, true)?;
        let out = dual::reshape(g, out, &shape)?;
        let out = self.proj.forward(g, out)?;
        dual::add(g, x, out)
    }
}

/// Attention across the `frames` temporal slots at every pixel. Features are
/// projected to `frames x head_dim` channels (the unfolded temporal layout),
/// attended per pixel and projected back.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    frames: usize,
    head_dim: usize,
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl TemporalAttention {
    pub fn new<S: Real>(mut init: Init<'_, S>, channels: usize, groups: usize, frames: usize, head_dim: usize) -> Self {
        let inner = frames * head_dim;
        Self {
            frames,
            head_dim,
            norm: GroupNorm::new(init.sub("norm"), groups, channels),
            qkv: Conv2d::pointwise(init.sub("qkv"), channels, 3 * inner, true),
            proj: Conv2d::build(init.sub("proj"), inner, channels, (1, 1), 1, (0, 0), 1, true, true),
        }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let shape = g.shape(x.p);
        let (n, hh, ww) = (shape[0], shape[2], shape[3]);
        let l = hh * ww;
        let (t, d) = (self.frames, self.head_dim);
        if t == 0 || d == 0 {
            bail!(Config, "temporal attention needs frames and head_dim > 0");
        }
        let h = self.norm.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let tokens = |i: usize| -> Result<Dual> {
            let part = dual::narrow(g, qkv, 1, i * t * d, t * d)?;
            let part = dual::reshape(g, part, &[n, t, d, l])?;
            let part = dual::permute(g, part, &[0, 3, 1, 2])?;
            dual::reshape(g, part, &[n * l, t, d])
        };
        let (q, k, v) = (tokens(0)?, tokens(1)?, tokens(2)?);
        let scores = dual::matmul(g, q, k, false, true)?;
        let scores = dual::scale(g, scores, S::of(1.0 / (d as f64).sqrt()));
        let attn = dual::softmax_last(g, scores)?;
        let out = dual::matmul(g, attn, v, false, false)?;
        let out = dual::reshape(g, out, &[n, l, t, d])?;
        let out = dual::permute(g, out, &[0, 2, 3, 1])?;
        let out = dual::reshape(g, out, &[n, t * d, hh, ww])?;
        let out = self.proj.forward(g, out)?;
        dual::add(g, x, out)
    }
}

/// Spatial attention followed by temporal attention.
#[derive(Clone, Debug)]
pub struct SpatioTemporalAttention {
    spatial: SpatialAttention,
    temporal: TemporalAttention,
}

impl SpatioTemporalAttention {
    pub fn new<S: Real>(
        mut init: Init<'_, S>,
        channels: usize,
        groups: usize,
        frames: usize,
        head_dim: usize,
    ) -> Self {
        Self {
            spatial: SpatialAttention::new(init.sub("spatial"), channels, groups),
            temporal: TemporalAttention::new(init.sub("temporal"), channels, groups, frames, head_dim),
        }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let x = self.spatial.forward(g, x)?;
        self.temporal.forward(g, x)
    }
}
