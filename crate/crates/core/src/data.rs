//! Frame sequences, event windows and the synthetic advected-blob generator.

#[allow(unused_imports)] // float math without std
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Ordered stack of frames stored as `[T, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    data: Vec<f32>,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    pub grid_spacing_km: f64,
    pub dt_minutes: f64,
}

impl FrameSequence {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if t == 0 || h == 0 || c == 0 {
            bail!(Input, "frame sequence needs T, H, C >= 1 (got {}x{}x{}x{})", t, h, w, c);
        }
        if h != w {
            bail!(Input, "frames must be square, got {}x{}", h, w);
        }
        if data.len() != t * h * w * c {
            bail!(Shape, "[{}, {}, {}, {}] needs {} values, got {}", t, h, w, c, t * h * w * c, data.len());
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            bail!(Input, "non-finite value {} in frame data", bad);
        }
        Ok(Self { data, t, h, w, c, grid_spacing_km: 1.0, dt_minutes: 5.0 })
    }

    pub fn zeros(t: usize, res: usize) -> Self {
        Self::new(t, res, res, 1, vec![0.0; t * res * res]).expect("valid zero sequence")
    }

    pub fn with_metadata(mut self, grid_spacing_km: f64, dt_minutes: f64) -> Self {
        self.grid_spacing_km = grid_spacing_km;
        self.dt_minutes = dt_minutes;
        self
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.t, self.h, self.w, self.c)
    }

    pub fn resolution(&self) -> usize {
        self.h
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Frames `start .. start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.t {
            bail!(Shape, "frames {}..{} of a {}-frame sequence", start, start + len, self.t);
        }
        let fl = self.frame_len();
        let mut s = Self::new(len, self.h, self.w, self.c, self.data[start * fl..(start + len) * fl].to_vec())?;
        s.grid_spacing_km = self.grid_spacing_km;
        s.dt_minutes = self.dt_minutes;
        Ok(s)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.h, self.w, self.c) != (other.h, other.w, other.c) {
            bail!(Shape, "cannot concatenate {:?} and {:?}", self.dims(), other.dims());
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut s = Self::new(self.t + other.t, self.h, self.w, self.c, data)?;
        s.grid_spacing_km = self.grid_spacing_km;
        s.dt_minutes = self.dt_minutes;
        Ok(s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let mut s = Self::new(self.t, self.h, self.w, self.c, self.data.iter().map(|&v| f(v)).collect())?;
        s.grid_spacing_km = self.grid_spacing_km;
        s.dt_minutes = self.dt_minutes;
        Ok(s)
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0)).expect("clamping keeps shape")
    }

    /// Frames-as-channels tensor `[1, T * C, H, W]` (channel index `t * C + c`).
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        let (t, h, w, c) = self.dims();
        let mut out = Vec::with_capacity(self.data.len());
        for ti in 0..t {
            for ci in 0..c {
                for p in 0..h * w {
                    out.push(S::of(self.data[(ti * h * w + p) * c + ci] as f64));
                }
            }
        }
        Tensor::new(&[1, t * c, h, w], out).expect("frame tensor shape")
    }

    /// Inverse of [`FrameSequence::to_tensor`] for one batch element.
    pub fn from_tensor<S: Real>(x: &Tensor<S>, batch: usize, channels: usize) -> Result<Self> {
        let s = x.shape();
        if s.len() != 4 || batch >= s[0] || channels == 0 || !s[1].is_multiple_of(channels) {
            bail!(Shape, "cannot read a frame sequence from tensor {:?}", s);
        }
        let (tc, h, w) = (s[1], s[2], s[3]);
        let t = tc / channels;
        let src = &x.data()[batch * tc * h * w..(batch + 1) * tc * h * w];
        let mut out = vec![0.0f32; tc * h * w];
        for ti in 0..t {
            for ci in 0..channels {
                for p in 0..h * w {
                    out[(ti * h * w + p) * channels + ci] = src[((ti * channels + ci) * h * w) + p].f64() as f32;
                }
            }
        }
        Self::new(t, h, w, channels, out)
    }
}

/// Paired context and target slices.
#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow {
    pub past: FrameSequence,
    pub future: FrameSequence,
}

/// Cuts `seq` into windows of `t_in` context frames followed by `t_out` targets.
pub fn slide_windows(seq: &FrameSequence, t_in: usize, t_out: usize, stride: usize) -> Result<Vec<EventWindow>> {
    if stride == 0 || t_in == 0 || t_out == 0 {
        bail!(Config, "window lengths and stride must be >= 1 (t_in={}, t_out={}, stride={})", t_in, t_out, stride);
    }
    if seq.len() < t_in + t_out {
        bail!(Empty, "sequence of {} frames is shorter than t_in + t_out = {}", seq.len(), t_in + t_out);
    }
    let count = (seq.len() - t_in - t_out) / stride + 1;
    (0..count)
        .map(|i| {
            let start = i * stride;
            Ok(EventWindow { past: seq.slice(start, t_in)?, future: seq.slice(start + t_in, t_out)? })
        })
        .collect()
}

/// Scales raw integer frames `[T, H, W]` by `scale_factor` and clamps to `[0, 1]`.
pub fn normalize<I: Copy + Into<f64>>(raw: &[I], t: usize, h: usize, w: usize, scale_factor: f64) -> Result<FrameSequence> {
    let data = raw.iter().map(|&v| (v.into() * scale_factor).clamp(0.0, 1.0) as f32).collect();
    FrameSequence::new(t, h, w, 1, data)
}

/// Area-average downsampling by an integer factor.
pub fn area_downsample(seq: &FrameSequence, res: usize) -> Result<FrameSequence> {
    let (t, h, w, c) = seq.dims();
    if res == 0 || h % res != 0 || w % res != 0 {
        bail!(Config, "cannot area-downsample {}x{} to {}x{} (integer factors only)", h, w, res, res);
    }
    if res == h {
        return Ok(seq.clone());
    }
    let f = h / res;
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0f32; t * res * res * c];
    for ti in 0..t {
        for y in 0..res {
            for x in 0..res {
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += seq.data[((ti * h + y * f + dy) * w + x * f + dx) * c + ci] as f64;
                        }
                    }
                    out[((ti * res + y) * res + x) * c + ci] = (acc * norm) as f32;
                }
            }
        }
    }
    let mut s = FrameSequence::new(t, res, res, c, out)?;
    s.grid_spacing_km = seq.grid_spacing_km * f as f64;
    s.dt_minutes = seq.dt_minutes;
    Ok(s)
}

/// One advected Gaussian blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Initial centre `(row, col)` in pixels.
    pub center: (f64, f64),
    /// Displacement per frame `(row, col)` in pixels.
    pub velocity: (f64, f64),
    pub sigma: f64,
    pub amplitude: f64,
    /// Exponential amplitude growth per frame.
    pub growth_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub blobs: Vec<Blob>,
    pub seed: u64,
}

/// Ranges from which [`SyntheticSceneSpec::sample`] draws blob parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRanges {
    pub n_blobs: (usize, usize),
    pub speed: (f64, f64),
    pub sigma: (f64, f64),
    pub amplitude: (f64, f64),
    pub growth_rate: (f64, f64),
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self { n_blobs: (2, 4), speed: (0.2, 1.0), sigma: (2.0, 5.0), amplitude: (0.3, 0.9), growth_rate: (-0.02, 0.02) }
    }
}

impl SyntheticSceneSpec {
    pub fn n_blobs(&self) -> usize {
        self.blobs.len()
    }

    /// Draws a scene on a `res x res` grid; identical seeds give identical scenes.
    pub fn sample(seed: u64, res: usize, ranges: &SceneRanges) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(ranges.n_blobs.0..=ranges.n_blobs.1.max(ranges.n_blobs.0));
        let between = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        // widths are meant for grids of 32 px and up; smaller grids would
        // saturate everywhere
        let shrink = (res as f64 / 32.0).min(1.0);
        let blobs = (0..n)
            .map(|_| {
                let angle = rng.gen_range(0.0..core::f64::consts::TAU);
                let speed = between(&mut rng, ranges.speed);
                Blob {
                    center: (rng.gen_range(0.0..res as f64), rng.gen_range(0.0..res as f64)),
                    velocity: (speed * angle.sin(), speed * angle.cos()),
                    sigma: between(&mut rng, ranges.sigma) * shrink,
                    amplitude: between(&mut rng, ranges.amplitude),
                    growth_rate: between(&mut rng, ranges.growth_rate),
                }
            })
            .collect();
        Self { blobs, seed }
    }

    fn validate(&self) -> Result<()> {
        for (i, b) in self.blobs.iter().enumerate() {
            let vals = [b.center.0, b.center.1, b.velocity.0, b.velocity.1, b.sigma, b.amplitude, b.growth_rate];
            if vals.iter().any(|v| !v.is_finite()) {
                bail!(Input, "blob {} has a non-finite parameter", i);
            }
            if b.sigma <= 0.0 {
                bail!(Input, "blob {} has sigma {} <= 0", i, b.sigma);
            }
            if !(b.amplitude > 0.0 && b.amplitude <= 1.0) {
                bail!(Input, "blob {} amplitude {} outside (0, 1]", i, b.amplitude);
            }
        }
        Ok(())
    }
}

/// Periodic Gaussian profile along one axis of length `n`, summed over the
/// nearest three periodic images.
fn periodic_gauss(x: f64, center: f64, sigma: f64, n: usize) -> f64 {
    let n = n as f64;
    let d = num_traits::Euclid::rem_euclid(&(x - center), &n);
    let d = if d > n / 2.0 { d - n } else { d };
    [-n, 0.0, n].iter().map(|k| (-(d + k) * (d + k) / (2.0 * sigma * sigma)).exp()).sum()
}

/// Renders `t` frames of advected, optionally growing Gaussian blobs on a
/// torus. Intensities are clamped to `[0, 1]`.
pub fn generate_synthetic_event(spec: &SyntheticSceneSpec, t: usize, h: usize, w: usize) -> Result<FrameSequence> {
    if t < 1 || h < 8 || w < 8 {
        bail!(Input, "synthetic events need T >= 1 and H, W >= 8 (got {}x{}x{})", t, h, w);
    }
    spec.validate()?;
    let mut data = vec![0.0f32; t * h * w];
    let mut rows = vec![0.0f64; h];
    let mut cols = vec![0.0f64; w];
    let mut frame = vec![0.0f64; h * w];
    for ti in 0..t {
        frame.fill(0.0);
        for b in &spec.blobs {
            let cy = b.center.0 + ti as f64 * b.velocity.0;
            let cx = b.center.1 + ti as f64 * b.velocity.1;
            let amp = b.amplitude * (b.growth_rate * ti as f64).exp();
            for (y, r) in rows.iter_mut().enumerate() {
                *r = periodic_gauss(y as f64, cy, b.sigma, h);
            }
            for (x, c) in cols.iter_mut().enumerate() {
                *c = periodic_gauss(x as f64, cx, b.sigma, w);
            }
            for y in 0..h {
                for x in 0..w {
                    frame[y * w + x] += amp * rows[y] * cols[x];
                }
            }
        }
        for (d, v) in data[ti * h * w..(ti + 1) * h * w].iter_mut().zip(&frame) {
            *d = v.clamp(0.0, 1.0) as f32;
        }
    }
    FrameSequence::new(t, h, w, 1, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Sevir,
    Meteonet,
}

impl Source {
    /// Raw-to-unit scale: VIL bytes (0..255) or reflectivity in dBZ (0..70).
    pub fn default_scale_factor(self) -> f64 {
        match self {
            Source::Synthetic => 1.0,
            Source::Sevir => 1.0 / 255.0,
            Source::Meteonet => 1.0 / 70.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub sample_count: usize,
    pub source: Source,
    pub scale_factor: f64,
}

impl DatasetManifest {
    pub fn new(split: Split, source: Source, sample_count: usize) -> Self {
        Self { split, sample_count, source, scale_factor: source.default_scale_factor() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(center: (f64, f64), velocity: (f64, f64), growth: f64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            blobs: vec![Blob { center, velocity, sigma: 2.5, amplitude: 0.8, growth_rate: growth }],
            seed: 7,
        }
    }

    #[test]
    fn empty_scene_is_all_zero() {
        let s = generate_synthetic_event(&SyntheticSceneSpec { blobs: vec![], seed: 0 }, 4, 16, 16).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stationary_blob_repeats_frame_zero() {
        let s = generate_synthetic_event(&blob((7.3, 9.1), (0.0, 0.0), 0.0), 5, 16, 16).unwrap();
        for t in 1..5 {
            assert_eq!(s.frame(t), s.frame(0));
        }
    }

    #[test]
    fn unit_velocity_is_a_circular_roll() {
        let s = generate_synthetic_event(&blob((14.2, 5.0), (1.0, 0.0), 0.0), 2, 16, 16).unwrap();
        // independent oracle: roll frame 0 by one row
        let f0 = s.frame(0);
        let mut rolled = vec![0.0f32; 256];
        for y in 0..16 {
            for x in 0..16 {
                rolled[((y + 1) % 16) * 16 + x] = f0[y * 16 + x];
            }
        }
        let err = rolled.iter().zip(s.frame(1)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-6, "max deviation {err}");
    }

    #[test]
    fn mass_is_conserved_without_growth() {
        let s = generate_synthetic_event(&blob((3.0, 30.0), (0.37, -0.61), 0.0), 12, 32, 32).unwrap();
        let m0: f64 = s.frame(0).iter().map(|&v| v as f64).sum();
        for t in 1..12 {
            let m: f64 = s.frame(t).iter().map(|&v| v as f64).sum();
            assert!(((m - m0) / m0).abs() < 1e-4, "frame {t}: {m} vs {m0}");
        }
    }

    #[test]
    fn growth_scales_amplitude() {
        let s = generate_synthetic_event(&blob((8.0, 8.0), (0.0, 0.0), 0.1), 3, 16, 16).unwrap();
        let peak = |t: usize| s.frame(t).iter().copied().fold(0.0f32, f32::max) as f64;
        assert!((peak(2) / peak(0) - (0.2f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn rendering_is_deterministic_and_clamped() {
        let spec = SyntheticSceneSpec::sample(42, 32, &SceneRanges { amplitude: (0.9, 1.0), ..Default::default() });
        let a = generate_synthetic_event(&spec, 6, 32, 32).unwrap();
        let b = generate_synthetic_event(&SyntheticSceneSpec::sample(42, 32, &SceneRanges { amplitude: (0.9, 1.0), ..Default::default() }), 6, 32, 32).unwrap();
        assert_eq!(a, b);
        assert!(a.is_normalized());
    }

    #[test]
    fn rejects_non_finite_and_tiny_grids() {
        let mut spec = blob((1.0, 1.0), (0.0, 0.0), 0.0);
        spec.blobs[0].velocity.0 = f64::NAN;
        assert!(generate_synthetic_event(&spec, 2, 16, 16).is_err());
        assert!(generate_synthetic_event(&blob((1.0, 1.0), (0.0, 0.0), 0.0), 2, 4, 4).is_err());
    }

    #[test]
    fn window_counts() {
        let seq = FrameSequence::zeros(49, 8);
        assert_eq!(slide_windows(&seq, 12, 36, 1).unwrap().len(), 2);
        assert_eq!(slide_windows(&FrameSequence::zeros(48, 8), 12, 36, 1).unwrap().len(), 1);
        assert!(matches!(slide_windows(&FrameSequence::zeros(47, 8), 12, 36, 1), Err(crate::Error::Empty(_))));
    }

    #[test]
    fn windows_partition_their_source_slice() {
        let data: Vec<f32> = (0..20 * 64).map(|i| (i % 97) as f32 / 97.0).collect();
        let seq = FrameSequence::new(20, 8, 8, 1, data).unwrap();
        let ws = slide_windows(&seq, 4, 4, 4).unwrap();
        assert_eq!(ws.len(), 4);
        for (i, w) in ws.iter().enumerate() {
            assert_eq!(w.past.concat(&w.future).unwrap(), seq.slice(i * 4, 8).unwrap());
        }
    }

    #[test]
    fn normalization_examples() {
        let s = normalize(&[0u8, 128, 255, 255], 1, 2, 2, Source::Sevir.default_scale_factor()).unwrap();
        assert_eq!(s.data(), &[0.0, (128.0f64 / 255.0) as f32, 1.0, 1.0]);
        let dbz = normalize(&[35.0f32, 80.0, -5.0, 70.0], 1, 2, 2, Source::Meteonet.default_scale_factor()).unwrap();
        assert_eq!(dbz.data(), &[0.5, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let data: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let s = FrameSequence::new(1, 4, 4, 1, data).unwrap();
        let d = area_downsample(&s, 2).unwrap();
        let want = [2.5f32, 4.5, 10.5, 12.5].map(|v| v / 16.0);
        assert_eq!(d.data(), &want);
        assert_eq!(d.grid_spacing_km, 2.0);
        assert!(area_downsample(&s, 3).is_err());
    }

    #[test]
    fn tensor_round_trip_with_channels() {
        let data: Vec<f32> = (0..2 * 3 * 3 * 2).map(|i| i as f32 / 40.0).collect();
        let s = FrameSequence::new(2, 3, 3, 2, data).unwrap();
        let x = s.to_tensor::<f64>();
        assert_eq!(x.shape(), &[1, 4, 3, 3]);
        assert_eq!(x.data()[9], s.data()[1] as f64);
        assert_eq!(FrameSequence::from_tensor(&x, 0, 2).unwrap(), s);
    }
}
