//! Autoregressive inference: one coarse forecast for the whole horizon, then
//! per window a sampled residual that also refines the next context.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{PixelFlowCast, Stages};
use crate::backbone::coarse_forecast;
use crate::data::FrameSequence;
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::pmf::{sample, SamplerConfig};
use crate::real::Real;
use crate::tensor::Tensor;

/// Instrumentation points of [`autoregressive_forecast`]. `k` is 1-based.
#[derive(Debug)]
pub enum ForecastEvent<'a, S> {
    /// The conditioning window for step `k`, before it is used.
    Window { k: usize, frames: usize },
    /// One x-prediction network call inside the sampler.
    NetworkCall { k: usize, step: usize, t: f64, r: f64 },
    /// The residual for window `k`, exactly as it enters the window update.
    Residual { k: usize, residual: &'a Tensor<S> },
}

/// All tensors are `[n, T_out * C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast<S> {
    pub coarse: Tensor<S>,
    pub residual: Tensor<S>,
    /// `clamp(coarse + residual, 0, 1)`.
    pub refined: Tensor<S>,
}

pub fn autoregressive_forecast<S: Real>(
    stages: Stages<'_, S>,
    past: &Tensor<S>,
    t_out: usize,
    sampler: &SamplerConfig,
    rng: &mut impl Rng,
    mut hook: impl FnMut(ForecastEvent<'_, S>),
) -> Result<Forecast<S>> {
    let bb = stages.backbone;
    let (tin, tw, c) = (bb.frames_in(), bb.frames_out(), bb.channels());
    if t_out == 0 || !t_out.is_multiple_of(tw) {
        bail!(Config, "t_out = {} is not a positive multiple of t_window = {}", t_out, tw);
    }
    let k_max = t_out / tw;
    let s = past.shape().to_vec();
    if s.len() != 4 || s[1] != tin * c {
        bail!(Shape, "forecast expects [n, {}, H, W], got {:?}", tin * c, s);
    }
    let coarse = {
        let g = Graph::inference(stages.store);
        let x = g.constant(past.clone());
        let y = coarse_forecast(bb, &g, x, k_max, |_, _| {})?;
        (*g.value(y)).clone()
    };
    let wc = tw * c;
    let mut window = past.clone();
    let mut residuals = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        hook(ForecastEvent::Window { k, frames: window.dim(1) / c });
        if window.dim(1) != tin * c {
            bail!(Shape, "conditioning window holds {} frames at step {}, expected {}", window.dim(1) / c, k, tin);
        }
        let coarse_k = coarse.narrow(1, (k - 1) * wc, wc)?;
        let cond = {
            let g = Graph::inference(stages.store);
            let x = g.constant(Tensor::concat(&[&window, &coarse_k], 1)?);
            let set = stages.condnet.forward(&g, x)?;
            set.maps.iter().map(|&m| (*g.value(m)).clone()).collect::<Vec<_>>()
        };
        let eps = Tensor::from_fn(coarse_k.shape(), |_| S::of(rng.sample::<f64, _>(StandardNormal)));
        let res = sample(stages.xpred, stages.store, &eps, &cond, sampler, |step, t, r| {
            hook(ForecastEvent::NetworkCall { k, step, t, r })
        })?;
        hook(ForecastEvent::Residual { k, residual: &res });
        // the context slides in the unclamped refined window
        let refined_k = coarse_k.add(&res)?;
        window = if tw >= tin {
            refined_k.narrow(1, (tw - tin) * c, tin * c)?
        } else {
            Tensor::concat(&[&window.narrow(1, tw * c, (tin - tw) * c)?, &refined_k], 1)?
        };
        residuals.push(res);
    }
    let residual = Tensor::concat(&residuals.iter().collect::<Vec<_>>(), 1)?;
    let refined = coarse.add(&residual)?.clamp(S::zero(), S::one());
    Ok(Forecast { coarse, residual, refined })
}

impl<S: Real> PixelFlowCast<S> {
    /// Coarse and refined `T_out`-frame forecasts from one context sequence.
    pub fn forecast_frames(
        &self,
        past: &FrameSequence,
        sampler: &SamplerConfig,
        rng: &mut impl Rng,
    ) -> Result<(FrameSequence, FrameSequence)> {
        let cfg = &self.config;
        if past.len() != cfg.t_in || past.channels() != cfg.channels {
            bail!(Shape, "expected {} frames of {} channels, got {:?}", cfg.t_in, cfg.channels, past.dims());
        }
        let out = autoregressive_forecast(self.stages(), &past.to_tensor(), cfg.t_out, sampler, rng, |_| {})?;
        let wrap = |x: &Tensor<S>| -> Result<FrameSequence> {
            Ok(FrameSequence::from_tensor(x, 0, cfg.channels)?.with_metadata(past.grid_spacing_km, past.dt_minutes))
        };
        Ok((wrap(&out.coarse)?, wrap(&out.refined)?))
    }
}
