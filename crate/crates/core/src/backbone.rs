//! Deterministic coarse forecaster (SimVP-lite): a per-frame encoder, an
//! inception translator over all frames, and a per-frame decoder.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::FrameSequence;
use crate::dual::{self, Dual};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvTranspose2, GroupNorm, Init, ParamStore};
use crate::real::Real;

const KERNELS: [usize; 4] = [3, 5, 7, 11];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub enc_channels: usize,
    pub enc_blocks: usize,
    pub translator_channels: usize,
    pub translator_blocks: usize,
    pub dec_channels: usize,
    pub dec_blocks: usize,
    /// Every channel count is divided by this.
    pub desk_scale_divisor: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            enc_channels: 64,
            enc_blocks: 4,
            translator_channels: 256,
            translator_blocks: 8,
            dec_channels: 64,
            dec_blocks: 4,
            desk_scale_divisor: 4,
        }
    }
}

impl BackboneConfig {
    /// `(encoder, translator, decoder)` widths after the divisor.
    pub fn widths(&self) -> Result<(usize, usize, usize)> {
        if self.desk_scale_divisor == 0 {
            bail!(Config, "desk_scale_divisor must be >= 1");
        }
        let d = self.desk_scale_divisor;
        let w = (self.enc_channels / d, self.translator_channels / d, self.dec_channels / d);
        if w.0 == 0 || w.1 == 0 || w.2 == 0 {
            bail!(Config, "backbone widths {:?} vanish under divisor {}", (self.enc_channels, self.translator_channels, self.dec_channels), d);
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 || self.enc_blocks / 2 != self.dec_blocks / 2 {
            bail!(Config, "encoder ({}) and decoder ({}) blocks must be >= 1 with matching resampling", self.enc_blocks, self.dec_blocks);
        }
        if w.0 != w.2 {
            bail!(Config, "encoder and decoder widths must match for the skip path ({} vs {})", w.0, w.2);
        }
        Ok(w)
    }

    /// Number of stride-2 stages in the encoder.
    pub fn downsamples(&self) -> usize {
        self.enc_blocks / 2
    }
}

/// Maps a `T_in`-frame window to the next `T_window` frames. Inputs and
/// outputs are frames-as-channels `[n, T * C, H, W]`.
pub trait WindowPredictor<S: Real> {
    fn frames_in(&self) -> usize;
    fn frames_out(&self) -> usize;
    fn channels(&self) -> usize;
    fn predict(&self, g: &Graph<'_, S>, past: Var) -> Result<Var>;
}

fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// Parallel grouped convolutions with kernels 3/5/7/11, summed, then
/// GroupNorm and SiLU.
#[derive(Clone, Debug)]
struct Inception {
    branches: Vec<Conv2d>,
    norm: GroupNorm,
}

impl Inception {
    fn new<S: Real>(mut init: Init<'_, S>, cin: usize, cout: usize, stride: usize) -> Self {
        let groups = if cin == cout { groups_for(cin) } else { 1 };
        let branches = KERNELS
            .iter()
            .map(|&k| Conv2d::build(init.sub(&format!("k{k}")), cin, cout, (k, k), stride, (k / 2, k / 2), groups, true, false))
            .collect();
        Self { branches, norm: GroupNorm::new(init.sub("norm"), groups_for(cout), cout) }
    }

    fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Dual) -> Result<Dual> {
        let mut acc = self.branches[0].forward(g, x)?;
        for b in &self.branches[1..] {
            acc = dual::add(g, acc, b.forward(g, x)?)?;
        }
        dual::silu(g, self.norm.forward(g, acc)?)
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Option<ConvTranspose2>,
    block: Inception,
}

#[derive(Clone, Debug)]
pub struct SimVp {
    pub config: BackboneConfig,
    frames: usize,
    channels: usize,
    encoder: Vec<Inception>,
    translator_in: Conv2d,
    translator: Vec<Inception>,
    translator_out: Conv2d,
    decoder: Vec<DecoderStage>,
    readout: Conv2d,
}

impl SimVp {
    /// `frames` is both `T_in` and `T_window`; `channels` is `C`.
    pub fn new<S: Real>(mut init: Init<'_, S>, config: &BackboneConfig, frames: usize, channels: usize) -> Result<Self> {
        let (ce, ct, cd) = config.widths()?;
        if frames == 0 || channels == 0 {
            bail!(Config, "backbone needs at least one frame and channel");
        }
        let encoder = (0..config.enc_blocks)
            .map(|i| {
                let cin = if i == 0 { channels } else { ce };
                Inception::new(init.sub(&format!("enc{i}")), cin, ce, if i % 2 == 1 { 2 } else { 1 })
            })
            .collect();
        let translator_in = Conv2d::pointwise(init.sub("trans_in"), frames * ce, ct, true);
        let translator = (0..config.translator_blocks).map(|i| Inception::new(init.sub(&format!("trans{i}")), ct, ct, 1)).collect();
        let translator_out = Conv2d::pointwise(init.sub("trans_out"), ct, frames * cd, true);
        // mirror of the encoder: upsample where the encoder downsampled
        let decoder = (0..config.dec_blocks)
            .map(|i| {
                let up = ((config.dec_blocks - 1 - i) % 2 == 1).then(|| ConvTranspose2::new(init.sub(&format!("dec{i}.up")), cd, cd));
                DecoderStage { up, block: Inception::new(init.sub(&format!("dec{i}")), cd, cd, 1) }
            })
            .collect();
        let readout = Conv2d::pointwise(init.sub("readout"), cd, channels, true);
        Ok(Self { config: config.clone(), frames, channels, encoder, translator_in, translator, translator_out, decoder, readout })
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, past: Var) -> Result<Var> {
        let s = g.shape(past);
        let (t, c) = (self.frames, self.channels);
        if s.len() != 4 || s[1] != t * c {
            bail!(Shape, "backbone expects [n, {}, H, W], got {:?}", t * c, s);
        }
        let factor = 1usize << self.config.downsamples();
        if !s[2].is_multiple_of(factor) || !s[3].is_multiple_of(factor) {
            bail!(Config, "resolution {}x{} is not divisible by {}", s[2], s[3], factor);
        }
        let n = s[0];
        let mut h = dual::reshape(g, Dual::constant(past), &[n * t, c, s[2], s[3]])?;
        let mut skip = None;
        for (i, block) in self.encoder.iter().enumerate() {
            h = block.forward(g, h)?;
            if i == 0 {
                skip = Some(h);
            }
        }
        let hs = g.shape(h.p);
        let (ce, lh, lw) = (hs[1], hs[2], hs[3]);
        h = dual::reshape(g, h, &[n, t * ce, lh, lw])?;
        h = self.translator_in.forward(g, h)?;
        for block in &self.translator {
            h = dual::add(g, h, block.forward(g, h)?)?;
        }
        h = self.translator_out.forward(g, h)?;
        let cd = g.shape(h.p)[1] / t;
        h = dual::reshape(g, h, &[n * t, cd, lh, lw])?;
        let last = self.decoder.len() - 1;
        for (i, stage) in self.decoder.iter().enumerate() {
            if let Some(up) = &stage.up {
                h = up.forward(g, h)?;
            }
            if i == last {
                h = dual::add(g, h, skip.expect("encoder has a first block"))?;
            }
            h = stage.block.forward(g, h)?;
        }
        let y = self.readout.forward(g, h)?;
        Ok(dual::reshape(g, y, &[n, t * c, s[2], s[3]])?.p)
    }
}

impl<S: Real> WindowPredictor<S> for SimVp {
    fn frames_in(&self) -> usize {
        self.frames
    }

    fn frames_out(&self) -> usize {
        self.frames
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn predict(&self, g: &Graph<'_, S>, past: Var) -> Result<Var> {
        self.forward(g, past)
    }
}

/// Repeats the last observed frame. Used to isolate the generative stage
/// from backbone quality in tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Persistence {
    pub frames_in: usize,
    pub frames_out: usize,
    pub channels: usize,
}

impl<S: Real> WindowPredictor<S> for Persistence {
    fn frames_in(&self) -> usize {
        self.frames_in
    }

    fn frames_out(&self) -> usize {
        self.frames_out
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn predict(&self, g: &Graph<'_, S>, past: Var) -> Result<Var> {
        let c = self.channels;
        let s = g.shape(past);
        if s.len() != 4 || s[1] != self.frames_in * c {
            bail!(Shape, "persistence expects [n, {}, H, W], got {:?}", self.frames_in * c, s);
        }
        let last = g.narrow(past, 1, s[1] - c, c)?;
        let copies: Vec<Var> = (0..self.frames_out).map(|_| last).collect();
        g.concat(&copies, 1)
    }
}

/// Applies `model` `k` times, sliding each output into the conditioning
/// window, and returns the `k` outputs concatenated along channels.
/// `hook(step, window_frames)` sees every window before it is used.
pub fn coarse_forecast<S: Real, M: WindowPredictor<S> + ?Sized>(
    model: &M,
    g: &Graph<'_, S>,
    past: Var,
    k: usize,
    mut hook: impl FnMut(usize, usize),
) -> Result<Var> {
    if k == 0 {
        bail!(Config, "autoregressive depth K must be >= 1");
    }
    let c = model.channels();
    let (tin, tw) = (model.frames_in(), model.frames_out());
    let mut window = past;
    let mut outs = Vec::with_capacity(k);
    for step in 0..k {
        let frames = g.shape(window)[1] / c;
        hook(step, frames);
        if frames != tin {
            bail!(Shape, "conditioning window holds {} frames, expected {}", frames, tin);
        }
        let y = model.predict(g, window)?;
        outs.push(y);
        window = if tw >= tin {
            g.narrow(y, 1, (tw - tin) * c, tin * c)?
        } else {
            let keep = g.narrow(window, 1, tw * c, (tin - tw) * c)?;
            g.concat(&[keep, y], 1)?
        };
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat(&outs, 1)
}

/// One window prediction on plain frame data.
pub fn coarse_window_predict<S: Real, M: WindowPredictor<S> + ?Sized>(
    model: &M,
    store: &ParamStore<S>,
    past: &FrameSequence,
) -> Result<FrameSequence> {
    coarse_forecast_frames(model, store, past, 1)
}

/// `k`-step coarse forecast on plain frame data.
pub fn coarse_forecast_frames<S: Real, M: WindowPredictor<S> + ?Sized>(
    model: &M,
    store: &ParamStore<S>,
    past: &FrameSequence,
    k: usize,
) -> Result<FrameSequence> {
    if past.len() != model.frames_in() || past.channels() != model.channels() {
        bail!(Shape, "expected {} frames of {} channels, got {:?}", model.frames_in(), model.channels(), past.dims());
    }
    let g = Graph::inference(store);
    let x = g.constant(past.to_tensor());
    let y = coarse_forecast(model, &g, x, k, |_, _| {})?;
    let out = FrameSequence::from_tensor(&g.value(y), 0, model.channels())?;
    Ok(out.with_metadata(past.grid_spacing_km, past.dt_minutes))
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::randomize;
    use crate::tensor::Tensor;
    use crate::testutil::rand_tensor;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            enc_channels: 4,
            enc_blocks: 2,
            translator_channels: 8,
            translator_blocks: 1,
            dec_channels: 4,
            dec_blocks: 2,
            desk_scale_divisor: 1,
        }
    }

    fn model(cfg: &BackboneConfig, frames: usize) -> (ParamStore<f64>, SimVp) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SimVp::new(Init::new(&mut store, &mut rng), cfg, frames, 1).unwrap();
        (store, m)
    }

    fn seq(t: usize, res: usize, seed: u64) -> FrameSequence {
        let x = rand_tensor(&[t * res * res], seed).map(|v| v.abs());
        FrameSequence::new(t, res, res, 1, x.data().iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn desk_default_shape() {
        let (store, m) = model(&BackboneConfig::default(), 12);
        let y = coarse_window_predict(&m, &store, &seq(12, 32, 1)).unwrap();
        assert_eq!(y.dims(), (12, 32, 32, 1));
    }

    #[test]
    fn zero_weights_give_zero_field() {
        let (mut store, m) = model(&tiny(), 3);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let y = coarse_window_predict(&m, &store, &seq(3, 8, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_recursive() {
        let (store, m) = model(&tiny(), 3);
        let past = seq(3, 8, 4);
        let a = coarse_window_predict(&m, &store, &past).unwrap();
        assert_eq!(a, coarse_window_predict(&m, &store, &past).unwrap());
        let three = coarse_forecast_frames(&m, &store, &past, 3).unwrap();
        assert_eq!(three.len(), 9);
        assert_eq!(three.slice(0, 3).unwrap(), a);
        // the second window is the prediction from the first one (which went
        // through f32 storage here)
        let b = coarse_window_predict(&m, &store, &a).unwrap();
        let err = three.slice(3, 3).unwrap().data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let p = Persistence { frames_in: 12, frames_out: 12, channels: 1 };
        let store = ParamStore::<f64>::new();
        let past = seq(12, 8, 5);
        let mut windows = vec![];
        let g = Graph::inference(&store);
        let y = coarse_forecast(&p, &g, g.constant(past.to_tensor()), 3, |k, f| windows.push((k, f))).unwrap();
        let out = FrameSequence::from_tensor(&g.value(y), 0, 1).unwrap();
        assert_eq!(out.len(), 36);
        for t in 0..36 {
            assert_eq!(out.frame(t), past.frame(11));
        }
        assert_eq!(windows, vec![(0, 12), (1, 12), (2, 12)]);
    }

    #[test]
    fn shorter_output_windows_slide() {
        let p = Persistence { frames_in: 4, frames_out: 2, channels: 1 };
        let store = ParamStore::<f64>::new();
        let past = seq(4, 8, 6);
        let out = coarse_forecast_frames(&p, &store, &past, 3).unwrap();
        assert_eq!(out.len(), 6);
        assert!((0..6).all(|t| out.frame(t) == past.frame(3)));
    }

    #[test]
    fn mse_zero_points() {
        let g = Graph::<f64>::detached();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::full(&[1, 2, 4, 4], 1.0));
        assert_eq!(g.value(g.mse(a, a).unwrap()).item(), 0.0);
        assert_eq!(g.value(g.mse(a, b).unwrap()).item(), 1.0);
    }

    #[test]
    fn gradients_match_differences() {
        let (mut store, m) = model(&tiny(), 2);
        randomize(&mut store, &mut ChaCha8Rng::seed_from_u64(8), 0.4);
        let past = rand_tensor(&[1, 2, 4, 4], 9).map(|v| v.abs());
        let target = rand_tensor(&[1, 2, 4, 4], 10).map(|v| v.abs());
        let loss = |s: &ParamStore<f64>| {
            let g = Graph::new(s);
            let y = m.forward(&g, g.constant(past.clone())).unwrap();
            let l = g.mse(y, g.constant(target.clone())).unwrap();
            (g.value(l).item(), g.backward(l).unwrap())
        };
        let (_, grads) = loss(&store);
        let h = 1e-5;
        let mut checked = 0;
        for id in store.ids().collect::<Vec<_>>() {
            let grad = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
            for j in (0..grad.len()).step_by(7) {
                let mut p = store.clone();
                p.value_mut(id).data_mut()[j] += h;
                let mut q = store.clone();
                q.value_mut(id).data_mut()[j] -= h;
                let fd = (loss(&p).0 - loss(&q).0) / (2.0 * h);
                let a = grad.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-6, "{} [{j}]: {a} vs {fd}", store.name(id));
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
