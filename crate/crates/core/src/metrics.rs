//! Skill scores on thresholded fields, SSIM, lead-time curves and latency
//! summaries.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float math without std
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::data::FrameSequence;
use crate::error::{bail, Result};

/// VIL thresholds on the raw 0..255 scale.
pub const VIL_THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];

/// Pooling windows of the pooled CSI.
pub const POOLS: [usize; 2] = [4, 16];

/// Cutoff in normalized units. Fields are stored as `f32`, so the cutoff is
/// too: a pixel holding exactly `raw * scale` then compares equal.
pub fn scaled_threshold(raw: f64, scale_factor: f64) -> f32 {
    (raw * scale_factor) as f32
}

/// `true` where `value >= cutoff`.
pub fn binarize(field: &[f32], cutoff: f32) -> Vec<bool> {
    field.iter().map(|&v| v >= cutoff).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FN + FP)`; 1 when there is neither an event nor an alarm.
    pub fn csi(&self) -> f64 {
        let d = self.tp + self.fn_ + self.fp;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// Heidke skill score; 0 when the denominator vanishes.
    pub fn hss(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let den = (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn);
        if den == 0.0 {
            0.0
        } else {
            2.0 * (tp * tn - fp * fn_) / den
        }
    }
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        bail!(Input, "binary fields of {} and {} pixels", pred.len(), gt.len());
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn csi(pred: &[f32], gt: &[f32], cutoff: f32) -> Result<f64> {
    Ok(confusion(&binarize(pred, cutoff), &binarize(gt, cutoff))?.csi())
}

pub fn hss(pred: &[f32], gt: &[f32], cutoff: f32) -> Result<f64> {
    Ok(confusion(&binarize(pred, cutoff), &binarize(gt, cutoff))?.hss())
}

/// Non-overlapping `pool x pool` means of an `h x w` field.
pub fn avg_pool(field: &[f32], h: usize, w: usize, pool: usize) -> Result<Vec<f32>> {
    if pool == 0 || !h.is_multiple_of(pool) || !w.is_multiple_of(pool) || field.len() != h * w {
        bail!(Input, "cannot pool a {}x{} field ({} values) with window {}", h, w, field.len(), pool);
    }
    if pool == 1 {
        return Ok(field.to_vec());
    }
    let (ph, pw) = (h / pool, w / pool);
    let mut out = vec![0.0f64; ph * pw];
    for y in 0..h {
        for x in 0..w {
            out[(y / pool) * pw + x / pool] += field[y * w + x] as f64;
        }
    }
    let n = (pool * pool) as f64;
    Ok(out.into_iter().map(|v| (v / n) as f32).collect())
}

/// CSI after average-pooling both fields with stride `pool`.
pub fn pooled_csi(pred: &[f32], gt: &[f32], h: usize, w: usize, pool: usize, cutoff: f32) -> Result<f64> {
    csi(&avg_pool(pred, h, w, pool)?, &avg_pool(gt, h, w, pool)?, cutoff)
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..SSIM_WIN).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..SSIM_WIN).map(|i| k[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of two `h x w` fields with dynamic range 1.
pub fn ssim(pred: &[f32], gt: &[f32], h: usize, w: usize) -> Result<f64> {
    if pred.len() != h * w || gt.len() != h * w {
        bail!(Input, "ssim fields must both hold {}x{} values", h, w);
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        bail!(Input, "ssim needs frames of at least {0}x{0}, got {1}x{2}", SSIM_WIN, h, w);
    }
    let k = gaussian_window();
    let a: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = gt.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&prod(&a, &a), h, w, &k);
    let bb = filter_valid(&prod(&b, &b), h, w, &k);
    let ab = filter_valid(&prod(&a, &b), h, w, &k);
    let n = mu_a.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(acc / n as f64)
}

/// Per-frame scores averaged over thresholds, plus the mean over the last
/// third of the horizon.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeCurves {
    pub csi: Vec<f64>,
    pub hss: Vec<f64>,
    pub last_third_csi: f64,
    pub last_third_hss: f64,
}

fn last_third(v: &[f64]) -> f64 {
    let n = (v.len() / 3).max(1).min(v.len());
    v[v.len() - n..].iter().sum::<f64>() / n as f64
}

fn check_pair(pred: &FrameSequence, gt: &FrameSequence) -> Result<()> {
    if pred.dims() != gt.dims() {
        bail!(Input, "forecast {:?} and truth {:?} differ in shape", pred.dims(), gt.dims());
    }
    Ok(())
}

pub fn lead_time_curves(pred: &FrameSequence, gt: &FrameSequence, cutoffs: &[f32]) -> Result<LeadTimeCurves> {
    check_pair(pred, gt)?;
    if cutoffs.is_empty() {
        bail!(Input, "no thresholds");
    }
    let m = cutoffs.len() as f64;
    let (mut c, mut h) = (Vec::with_capacity(pred.len()), Vec::with_capacity(pred.len()));
    for i in 0..pred.len() {
        let (p, g) = (pred.frame(i), gt.frame(i));
        let mut cs = 0.0;
        let mut hs = 0.0;
        for &cut in cutoffs {
            let cm = confusion(&binarize(p, cut), &binarize(g, cut))?;
            cs += cm.csi();
            hs += cm.hss();
        }
        c.push(cs / m);
        h.push(hs / m);
    }
    Ok(LeadTimeCurves { last_third_csi: last_third(&c), last_third_hss: last_third(&h), csi: c, hss: h })
}

/// Wall-clock summary in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            bail!(Input, "no timed samples");
        }
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Ok(Self { samples: n, mean: s.iter().sum::<f64>() / n as f64, median, min: s[0] })
    }
}

/// Runs that remain timed after discarding `warmup` of `total`.
pub fn timed_count(total: usize, warmup: usize) -> usize {
    total.saturating_sub(warmup)
}

/// Scores of one (event, frame, threshold) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub event: usize,
    pub frame: usize,
    pub threshold: f64,
    pub csi: f64,
    pub hss: f64,
    /// Pooled CSI, one entry per pool in [`MetricReport::pools`].
    pub pooled_csi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub csi: f64,
    pub hss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledScore {
    pub pool: usize,
    pub threshold: f64,
    pub csi: f64,
}

/// Scores averaged per frame, then over frames, then over events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub events: usize,
    pub pools: Vec<usize>,
    pub per_threshold: Vec<ThresholdScore>,
    /// Means of the per-threshold scores.
    pub mean_csi: f64,
    pub mean_hss: f64,
    pub pooled: Vec<PooledScore>,
    pub ssim: f64,
    pub per_lead_time: LeadTimeCurves,
    pub latency_s: Option<LatencyStats>,
}

/// Accumulates events into a [`MetricReport`] and keeps every row.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub thresholds: Vec<f64>,
    pub scale_factor: f64,
    pub pools: Vec<usize>,
    pub rows: Vec<MetricRow>,
    ssim: Vec<f64>,
    curves: Vec<LeadTimeCurves>,
}

impl Evaluator {
    /// Pools that do not divide `resolution` are dropped.
    pub fn new(thresholds: &[f64], scale_factor: f64, resolution: usize) -> Self {
        let pools = POOLS.iter().copied().filter(|&p| p <= resolution && resolution.is_multiple_of(p)).collect();
        Self { thresholds: thresholds.to_vec(), scale_factor, pools, rows: Vec::new(), ssim: Vec::new(), curves: Vec::new() }
    }

    pub fn add_event(&mut self, pred: &FrameSequence, gt: &FrameSequence) -> Result<()> {
        check_pair(pred, gt)?;
        if pred.channels() != 1 {
            bail!(Input, "scores are defined on single-channel fields, got {} channels", pred.channels());
        }
        if !self.curves.is_empty() && self.curves[0].csi.len() != pred.len() {
            bail!(Input, "event of {} frames after events of {}", pred.len(), self.curves[0].csi.len());
        }
        let event = self.curves.len();
        let res = pred.resolution();
        let cutoffs: Vec<f32> = self.thresholds.iter().map(|&t| scaled_threshold(t, self.scale_factor)).collect();
        let mut ssim_sum = 0.0;
        for f in 0..pred.len() {
            let (p, g) = (pred.frame(f), gt.frame(f));
            for (&threshold, &cut) in self.thresholds.iter().zip(&cutoffs) {
                let cm = confusion(&binarize(p, cut), &binarize(g, cut))?;
                let pooled = self.pools.iter().map(|&k| pooled_csi(p, g, res, res, k, cut)).collect::<Result<_>>()?;
                self.rows.push(MetricRow { event, frame: f, threshold, csi: cm.csi(), hss: cm.hss(), pooled_csi: pooled });
            }
            ssim_sum += ssim(p, g, res, res)?;
        }
        self.ssim.push(ssim_sum / pred.len() as f64);
        self.curves.push(lead_time_curves(pred, gt, &cutoffs)?);
        Ok(())
    }

    pub fn report(&self, latency_s: Option<LatencyStats>) -> Result<MetricReport> {
        let events = self.curves.len();
        if events == 0 {
            bail!(Empty, "no events evaluated");
        }
        // every cell carries the same weight, so row means equal the
        // frame-then-event means
        let mean_of = |f: &dyn Fn(&MetricRow) -> Option<f64>| {
            let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let per_threshold: Vec<ThresholdScore> = self
            .thresholds
            .iter()
            .map(|&t| ThresholdScore {
                threshold: t,
                csi: mean_of(&|r| (r.threshold == t).then_some(r.csi)),
                hss: mean_of(&|r| (r.threshold == t).then_some(r.hss)),
            })
            .collect();
        let mut pooled = Vec::new();
        for (i, &pool) in self.pools.iter().enumerate() {
            for &t in &self.thresholds {
                pooled.push(PooledScore { pool, threshold: t, csi: mean_of(&|r| (r.threshold == t).then_some(r.pooled_csi[i])) });
            }
        }
        let frames = self.curves[0].csi.len();
        let avg = |pick: &dyn Fn(&LeadTimeCurves) -> &Vec<f64>| -> Vec<f64> {
            (0..frames).map(|f| self.curves.iter().map(|c| pick(c)[f]).sum::<f64>() / events as f64).collect()
        };
        let csi = avg(&|c| &c.csi);
        let hss = avg(&|c| &c.hss);
        let n = per_threshold.len() as f64;
        Ok(MetricReport {
            events,
            pools: self.pools.clone(),
            mean_csi: per_threshold.iter().map(|s| s.csi).sum::<f64>() / n,
            mean_hss: per_threshold.iter().map(|s| s.hss).sum::<f64>() / n,
            per_threshold,
            pooled,
            ssim: self.ssim.iter().sum::<f64>() / events as f64,
            per_lead_time: LeadTimeCurves { last_third_csi: last_third(&csi), last_third_hss: last_third(&hss), csi, hss },
            latency_s,
        })
    }
}

#[cfg(test)]
mod tests;
