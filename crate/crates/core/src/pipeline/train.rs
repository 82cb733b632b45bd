//! One joint step: coarse forecast over the horizon, a random window `k`,
//! the pixel mean-flow loss on its residual, one AdamW update on the sum.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::optim::{clip_global_norm, AdamW, Schedule};
use super::{PixelFlowCast, TrainConfig};
use crate::backbone::coarse_forecast;
use crate::data::EventWindow;
use crate::error::{bail, Error, Result};
use crate::graph::Graph;
use crate::pmf::{draw_times, pmf_loss};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// MSE on the coarse forecast only; touches backbone weights only.
    Pretrain,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    /// Zero-based index of the update.
    pub step: usize,
    /// Window drawn for the residual loss (1-based; 0 when pretraining).
    pub k: usize,
    pub coarse: f64,
    pub pmf: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Stacks windows into `[B, T_in * C, H, W]` and `[B, T_out * C, H, W]`.
pub fn batch_tensors<S: Real>(windows: &[&EventWindow], t_in: usize, t_out: usize) -> Result<(Tensor<S>, Tensor<S>)> {
    if windows.is_empty() {
        bail!(Empty, "empty batch");
    }
    let mut past = Vec::with_capacity(windows.len());
    let mut future = Vec::with_capacity(windows.len());
    for w in windows {
        if w.past.len() != t_in || w.future.len() != t_out {
            bail!(Shape, "window has {}+{} frames, expected {}+{}", w.past.len(), w.future.len(), t_in, t_out);
        }
        past.push(w.past.to_tensor::<S>());
        future.push(w.future.to_tensor::<S>());
    }
    let cat = |v: &[Tensor<S>]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
    Ok((cat(&past)?, cat(&future)?))
}

fn finite(value: f64, which: &str, step: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite { which: which.into(), at: format!("step {step}") });
    }
    Ok(value)
}

/// Owns a model, its optimizer state and the training RNG stream.
#[derive(Clone, Debug)]
pub struct Trainer<S: Real> {
    pub model: PixelFlowCast<S>,
    pub config: TrainConfig,
    pub phase: Phase,
    pub optimizer: AdamW<S>,
    pub schedule: Schedule,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl<S: Real> Trainer<S> {
    /// `total_steps` sizes the learning-rate schedule.
    pub fn new(model: PixelFlowCast<S>, config: &TrainConfig, phase: Phase, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(match phase {
            Phase::Pretrain => 1,
            Phase::Joint => 2,
        });
        Ok(Self {
            optimizer: AdamW::new(config.optimizer, &model.store),
            schedule: Schedule::new(config.optimizer.base_lr, total_steps, config.warmup_fraction),
            model,
            config: config.clone(),
            phase,
            step: 0,
            rng,
        })
    }

    /// Updates in `epochs` passes over `windows` windows.
    pub fn steps_for(windows: usize, batch_size: usize, epochs: usize) -> usize {
        epochs * windows.div_ceil(batch_size.max(1))
    }

    /// One gradient update. On a non-finite loss or gradient the weights and
    /// optimizer state are left untouched.
    pub fn train_step(&mut self, windows: &[&EventWindow]) -> Result<StepLosses> {
        let cfg = &self.model.config;
        let (past, future) = batch_tensors::<S>(windows, cfg.t_in, cfg.t_out)?;
        let (k_max, wc) = (cfg.k(), cfg.t_window * cfg.channels);
        let (w_coarse, w_pmf) = self.config.loss_weights;
        let step = self.step;

        let g = Graph::new(&self.model.store);
        let p = g.constant(past);
        let f = g.constant(future);
        let coarse = coarse_forecast(&self.model.backbone, &g, p, k_max, |_, _| {})?;
        let l_coarse = g.mse(coarse, f)?;
        let coarse_v = finite(g.value(l_coarse).item().f64(), "L_coarse", step)?;

        let (k, pmf_v, loss) = match self.phase {
            Phase::Pretrain => (0, 0.0, l_coarse),
            Phase::Joint => {
                let k = self.rng.gen_range(1..=k_max);
                let coarse_k = g.narrow(coarse, 1, (k - 1) * wc, wc)?;
                let x_res = g.sub(g.narrow(f, 1, (k - 1) * wc, wc)?, coarse_k)?;
                // teacher forcing: the context of window k > 1 is ground truth
                let past_k = if k == 1 { p } else { g.narrow(f, 1, (k - 2) * wc, wc)? };
                let cond = self.model.condnet.forward(&g, g.concat(&[past_k, coarse_k], 1)?)?;
                let shape = g.shape(x_res);
                let (t, r) = draw_times(shape[0], &mut self.rng, self.config.t_min);
                let eps = Tensor::from_fn(&shape, |_| S::of(self.rng.sample::<f64, _>(StandardNormal)));
                let lp = pmf_loss(&self.model.xpred, &g, x_res, &eps, &t, &r, &cond, self.config.detach_jvp, self.config.t_min)?;
                let pmf_v = finite(g.value(lp.loss).item().f64(), "L_PMF", step)?;
                let total = g.add(g.scale(l_coarse, S::of(w_coarse)), g.scale(lp.loss, S::of(w_pmf)))?;
                (k, pmf_v, total)
            }
        };
        let mut grads = g.backward(loss)?;
        drop(g);
        let grad_norm = finite(clip_global_norm(&mut grads, self.config.grad_clip), "gradient norm", step)?;
        let lr = self.schedule.lr(step);
        self.optimizer.update(&mut self.model.store, &grads, lr);
        self.step += 1;
        let total = w_coarse * coarse_v + w_pmf * pmf_v;
        Ok(StepLosses { step, k, coarse: coarse_v, pmf: pmf_v, total, lr, grad_norm })
    }

    /// One shuffled pass over `windows` in batches of `batch_size`.
    pub fn run_epoch(&mut self, windows: &[EventWindow], mut on_step: impl FnMut(&StepLosses)) -> Result<Vec<StepLosses>> {
        if windows.is_empty() {
            bail!(Empty, "no training windows");
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&EventWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let losses = self.train_step(&batch)?;
            on_step(&losses);
            out.push(losses);
        }
        Ok(out)
    }
}
