//! Joint training, autoregressive inference and run configuration.

mod forecast;
mod optim;
mod train;

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use forecast::{autoregressive_forecast, Forecast, ForecastEvent};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, Schedule};
pub use train::{batch_tensors, Phase, StepLosses, Trainer};

use crate::backbone::{BackboneConfig, Persistence, SimVp, WindowPredictor};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::kancondnet::{KanCondNet, KanCondNetConfig};
use crate::nn::{Init, ParamStore};
use crate::pmf::{XPredNet, XPredNetConfig, XPredictor, T_MIN};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Float32,
    Float64,
}

/// Which coarse forecaster the bundle carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Simvp,
    /// Repeat the last observed frame; has no weights.
    Persistence,
}

/// Window geometry and the three sub-network configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub t_in: usize,
    pub t_window: usize,
    pub t_out: usize,
    pub channels: usize,
    pub resolution: usize,
    pub backbone_kind: BackboneKind,
    pub backbone: BackboneConfig,
    pub kancondnet: KanCondNetConfig,
    pub xprednet: XPredNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_in: 12,
            t_window: 12,
            t_out: 36,
            channels: 1,
            resolution: 128,
            backbone_kind: BackboneKind::Simvp,
            backbone: BackboneConfig::default(),
            kancondnet: KanCondNetConfig::default(),
            xprednet: XPredNetConfig::default(),
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter model for smoke runs and oracle tests.
    pub fn tiny(t_in: usize, t_out: usize, resolution: usize) -> Self {
        let w = |k: usize| k * t_in;
        Self {
            t_in,
            t_window: t_in,
            t_out,
            channels: 1,
            resolution,
            backbone_kind: BackboneKind::Simvp,
            backbone: BackboneConfig {
                enc_channels: 8,
                enc_blocks: 2,
                translator_channels: 16,
                translator_blocks: 2,
                dec_channels: 8,
                dec_blocks: 2,
                desk_scale_divisor: 1,
            },
            kancondnet: KanCondNetConfig { level_channels: alloc::vec![w(2), w(2), w(4), w(4)], ..Default::default() },
            xprednet: XPredNetConfig {
                base_channels: 8,
                channel_multipliers: alloc::vec![1, 2, 3, 4],
                blocks_per_level: 1,
                norm_groups: 4,
                attention: true,
                head_dim: 2,
                time_embed_dim: 8,
                ..Default::default()
            },
        }
    }

    /// Number of autoregressive windows `K = T_out / T_window`.
    pub fn k(&self) -> usize {
        self.t_out / self.t_window
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_window == 0 || self.t_out == 0 || self.channels == 0 {
            bail!(Config, "t_in, t_window, t_out and channels must be >= 1");
        }
        if !self.t_out.is_multiple_of(self.t_window) {
            bail!(Config, "t_out = {} is not a multiple of t_window = {}", self.t_out, self.t_window);
        }
        if self.t_window != self.t_in {
            bail!(Config, "t_window ({}) must equal t_in ({})", self.t_window, self.t_in);
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(8) {
            bail!(Config, "resolution {} must be a positive multiple of 8", self.resolution);
        }
        let levels = self.xprednet.channel_multipliers.len();
        if levels != self.kancondnet.level_channels.len() {
            bail!(Config, "x-prediction net has {} levels, condition encoder {}", levels, self.kancondnet.level_channels.len());
        }
        self.backbone.widths()?;
        self.kancondnet.validate(self.t_window)?;
        self.xprednet.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Skip backbone pretraining and start joint training from random weights.
    pub cold_start: bool,
    pub batch_size: usize,
    /// Weights of `(L_coarse, L_PMF)`.
    pub loss_weights: (f64, f64),
    pub seed: u64,
    pub precision: Precision,
    /// Treat the `du/dt` term as a constant in the backward pass.
    pub detach_jvp: bool,
    pub t_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            warmup_fraction: 0.1,
            grad_clip: 1.0,
            epochs: 100,
            pretrain_epochs: 0,
            cold_start: true,
            batch_size: 1,
            loss_weights: (1.0, 1.0),
            seed: 0,
            precision: Precision::Float32,
            detach_jvp: false,
            t_min: T_MIN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.loss_weights;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            bail!(Config, "loss_weights must be strictly positive, got ({}, {})", a, b);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            bail!(Config, "warmup_fraction {} outside [0, 1)", self.warmup_fraction);
        }
        if !(self.optimizer.base_lr > 0.0) || !(self.grad_clip > 0.0) {
            bail!(Config, "base_lr and grad_clip must be positive");
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            bail!(Config, "t_min {} outside (0, 1)", self.t_min);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Simvp(SimVp),
    Persistence(Persistence),
}

impl<S: Real> WindowPredictor<S> for Backbone {
    fn frames_in(&self) -> usize {
        match self {
            Backbone::Simvp(m) => WindowPredictor::<S>::frames_in(m),
            Backbone::Persistence(m) => WindowPredictor::<S>::frames_in(m),
        }
    }

    fn frames_out(&self) -> usize {
        match self {
            Backbone::Simvp(m) => WindowPredictor::<S>::frames_out(m),
            Backbone::Persistence(m) => WindowPredictor::<S>::frames_out(m),
        }
    }

    fn channels(&self) -> usize {
        match self {
            Backbone::Simvp(m) => WindowPredictor::<S>::channels(m),
            Backbone::Persistence(m) => WindowPredictor::<S>::channels(m),
        }
    }

    fn predict(&self, g: &Graph<'_, S>, past: Var) -> Result<Var> {
        match self {
            Backbone::Simvp(m) => m.predict(g, past),
            Backbone::Persistence(m) => m.predict(g, past),
        }
    }
}

/// Backbone, condition encoder and x-prediction net sharing one parameter
/// store. Names are prefixed `backbone.`, `kancondnet.` and `xprednet.`.
#[derive(Clone, Debug)]
pub struct PixelFlowCast<S: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub backbone: Backbone,
    pub condnet: KanCondNet,
    pub xpred: XPredNet,
}

impl<S: Real> PixelFlowCast<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let (tin, tw, c) = (config.t_in, config.t_window, config.channels);
        let backbone = match config.backbone_kind {
            BackboneKind::Simvp => Backbone::Simvp(SimVp::new(init.sub("backbone"), &config.backbone, tin, c)?),
            BackboneKind::Persistence => Backbone::Persistence(Persistence { frames_in: tin, frames_out: tw, channels: c }),
        };
        let condnet = KanCondNet::new(init.sub("kancondnet"), &config.kancondnet, (tin + tw) * c, tw)?;
        let xpred = XPredNet::new(init.sub("xprednet"), &config.xprednet, tw, c, &config.kancondnet.level_channels)?;
        Ok(Self { config: config.clone(), store, backbone, condnet, xpred })
    }

    pub fn stages(&self) -> Stages<'_, S> {
        Stages { store: &self.store, backbone: &self.backbone, condnet: &self.condnet, xpred: &self.xpred }
    }

    /// Same architecture and weights in another precision.
    pub fn cast<T: Real>(&self) -> PixelFlowCast<T> {
        PixelFlowCast {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            condnet: self.condnet.clone(),
            xpred: self.xpred.clone(),
        }
    }

    /// Parameters of one sub-network, by name prefix.
    pub fn param_ids(&self, prefix: &str) -> Vec<crate::nn::ParamId> {
        self.store.with_prefix(prefix).collect()
    }
}

/// Borrowed view of the three stages. Any stage can be replaced by a stub.
#[derive(Clone, Copy)]
pub struct Stages<'a, S: Real> {
    pub store: &'a ParamStore<S>,
    pub backbone: &'a dyn WindowPredictor<S>,
    pub condnet: &'a KanCondNet,
    pub xpred: &'a dyn XPredictor<S>,
}
