//! Few-step Euler sampler with `r = t - 1/N`.

use alloc::vec;

use serde::{Deserialize, Serialize};

use super::XPredictor;
use crate::dual::Dual;
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::kancondnet::ConditionSet;
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    /// Return the last step's x-prediction.
    NoiseFree,
    /// Return the Euler-integrated state.
    Accumulation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub extraction: Extraction,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 10, extraction: Extraction::NoiseFree }
    }
}

/// Integrates from `Z = eps` at `t = 1` in `N` steps and extracts the
/// residual. `cond` holds the condition maps as plain tensors; every step runs
/// on a fresh inference tape. `hook(step, t, r)` fires once per network call.
pub fn sample<S: Real, P: XPredictor<S> + ?Sized>(
    net: &P,
    store: &ParamStore<S>,
    eps: &Tensor<S>,
    cond: &[Tensor<S>],
    cfg: &SamplerConfig,
    mut hook: impl FnMut(usize, f64, f64),
) -> Result<Tensor<S>> {
    let n = cfg.steps;
    if n == 0 {
        bail!(Config, "sampler needs at least one step");
    }
    let batch = eps.dim(0);
    let dt = 1.0 / n as f64;
    let mut z = eps.clone();
    let mut last = None;
    for i in 0..n {
        let t = (n - i) as f64 / n as f64;
        let r = (n - i - 1) as f64 / n as f64;
        hook(i, t, r);
        let g = Graph::inference(store);
        let maps = cond.iter().map(|c| g.constant(c.clone())).collect();
        let zv = g.constant(z.clone());
        let pred = net.forward(&g, Dual::constant(zv), &vec![t; batch], &vec![r; batch], &ConditionSet { maps }, false)?;
        let x_pred = g.value(pred.p);
        let step = S::of(dt / t);
        // Z <- Z - dt * (Z - X_pred) / t
        z = z.zip_map(&x_pred, |z, x| z - step * (z - x))?;
        last = Some((*x_pred).clone());
    }
    Ok(match cfg.extraction {
        Extraction::NoiseFree => last.expect("at least one step"),
        Extraction::Accumulation => z,
    })
}

