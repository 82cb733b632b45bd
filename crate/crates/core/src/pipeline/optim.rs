//! AdamW, the warmup + cosine learning-rate schedule and gradient clipping.

#[allow(unused_imports)] // float math without std
use num_traits::Float;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::Grads;
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { base_lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Linear warmup over the first `warmup_fraction` of `total` steps, then
/// cosine annealing to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total: usize,
    pub warmup: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total: usize, warmup_fraction: f64) -> Self {
        let warmup = ((total as f64) * warmup_fraction).round() as usize;
        Self { base_lr, total, warmup: warmup.min(total) }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            return self.base_lr * step as f64 / self.warmup as f64;
        }
        let span = self.total - self.warmup;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        0.5 * self.base_lr * (1.0 + (core::f64::consts::PI * progress).cos())
    }
}

/// Rescales `grads` so their global 2-norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<S: Real>(grads: &mut Grads<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(S::of(max_norm / norm));
    }
    norm
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(config: AdamWConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update with learning rate `lr`. Parameters the loss did not reach
    /// are left untouched, weight decay included.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &Grads<S>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (ob1, ob2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let decay = S::of(1.0 - lr * c.weight_decay);
        let step = S::of(lr / bc1);
        let (sbc2, eps) = (S::of(bc2.sqrt()), S::of(c.eps));
        for (id, g) in grads.params() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(id);
            let it = w.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data());
            for (((w, m), v), &g) in it {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w = *w * decay - step * *m / (v.sqrt() / sbc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let s = Schedule::new(1e-4, 1000, 0.1);
        assert_eq!(s.warmup, 100);
        assert!(s.lr(0).abs() < 1e-9);
        assert!((s.lr(50) - 5e-5).abs() < 1e-9);
        assert!((s.lr(100) - 1e-4).abs() < 1e-9);
        assert!((s.lr(550) - 5e-5).abs() < 1e-9);
        assert!(s.lr(1000).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for k in 100..=1000 {
            assert!(s.lr(k) <= prev);
            prev = s.lr(k);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w".into(), Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        let g = crate::graph::Graph::new(&store);
        let w = g.param(id);
        let loss = g.sum_all(g.scale(w, 3.0));
        let grads = g.backward(loss).unwrap();
        drop(g);
        opt.update(&mut store, &grads, 0.1);
        // bias-corrected first step is lr * sign(g)
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a".into(), Tensor::full(&[1], 2.0));
        let b = store.add("b".into(), Tensor::full(&[1], 2.0));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() }, &store);
        let g = crate::graph::Graph::new(&store);
        let loss = g.scale(g.param(a), 0.0);
        let grads = g.backward(g.sum_all(loss)).unwrap();
        drop(g);
        opt.update(&mut store, &grads, 0.1);
        // zero gradient: only the decay moves `a`; `b` never reached the loss
        assert!((store.value(a).item() - 2.0 * 0.95).abs() < 1e-12);
        assert_eq!(store.value(b).item(), 2.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w".into(), Tensor::full(&[4], 1.0));
        let g = crate::graph::Graph::new(&store);
        let w = g.param(id);
        let loss = g.sum_all(g.scale(w, 5.0));
        let mut grads = g.backward(loss).unwrap();
        assert_eq!(clip_global_norm(&mut grads, 1.0), 10.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
