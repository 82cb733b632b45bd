#[allow(unused_imports)] // float math without std
use num_traits::Float;
use super::{Init, ParamId};
use crate::dual::{self, Dual};
use crate::error::Result;
use crate::graph::Graph;
use crate::real::Real;

/// 2-D convolution with optional bias and channel groups.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Conv2d {
    /// Square `kernel`, "same" padding for stride 1, bias, no groups.
    pub fn new<S: Real>(init: Init<'_, S>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self::build(init, cin, cout, (kernel, kernel), stride, (kernel / 2, kernel / 2), 1, true, false)
    }

    pub fn grouped<S: Real>(init: Init<'_, S>, cin: usize, cout: usize, kernel: usize, groups: usize) -> Self {
        Self::build(init, cin, cout, (kernel, kernel), 1, (kernel / 2, kernel / 2), groups, true, false)
    }

    /// 1x1 convolution.
    pub fn pointwise<S: Real>(init: Init<'_, S>, cin: usize, cout: usize, bias: bool) -> Self {
        Self::build(init, cin, cout, (1, 1), 1, (0, 0), 1, bias, false)
    }

    /// Same as [`Conv2d::new`] but with all weights and bias at zero.
    pub fn zeroed<S: Real>(init: Init<'_, S>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::build(init, cin, cout, (kernel, kernel), 1, (kernel / 2, kernel / 2), 1, true, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build<S: Real>(
        mut init: Init<'_, S>,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
        groups: usize,
        bias: bool,
        zero: bool,
    ) -> Self {
        let fan_in = (cin / groups) * kernel.0 * kernel.1;
        let bound = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
        let weight = init.uniform("weight", &[cout, cin / groups, kernel.0, kernel.1], bound);
        let bias = bias.then(|| init.uniform("bias", &[cout], bound));
        Self { weight, bias, stride, pad, groups }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        dual::conv2d(g, x, w, b, self.stride, self.pad, self.groups)
    }
}

/// Stride-2, kernel-2 transposed convolution (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2 {
    pub fn new<S: Real>(mut init: Init<'_, S>, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / ((cout * 4) as f64).sqrt();
        let weight = init.uniform("weight", &[cin, cout, 2, 2], bound);
        let bias = init.uniform("bias", &[cout], bound);
        Self { weight, bias }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        dual::conv_transpose2(g, x, g.param(self.weight), Some(g.param(self.bias)))
    }
}

/// `x @ W + b` on `[batch, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Real>(mut init: Init<'_, S>, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = init.uniform("weight", &[din, dout], bound);
        let bias = init.uniform("bias", &[dout], bound);
        Self { weight, bias }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let y = dual::matmul(g, x, Dual::constant(g.param(self.weight)), false, false)?;
        dual::add_channel(g, y, Dual::constant(g.param(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<S: Real>(mut init: Init<'_, S>, groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "{groups} groups for {channels} channels");
        let gamma = init.constant("gamma", &[channels], 1.0);
        let beta = init.constant("beta", &[channels], 0.0);
        Self { groups, gamma, beta, eps: 1e-5 }
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let y = dual::group_norm(g, x, self.groups, S::of(self.eps))?;
        let y = dual::mul_channel(g, y, Dual::constant(g.param(self.gamma)))?;
        dual::add_channel(g, y, Dual::constant(g.param(self.beta)))
    }
}
