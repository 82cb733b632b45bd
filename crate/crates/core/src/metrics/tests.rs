use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn brute(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let (mut hits, mut misses, mut alarms, mut nulls) = (0u32, 0u32, 0u32, 0u32);
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            hits += 1;
        } else if gt[i] {
            misses += 1;
        } else if pred[i] {
            alarms += 1;
        } else {
            nulls += 1;
        }
    }
    let n = pred.len() as f64;
    let csi = if hits + misses + alarms == 0 { 1.0 } else { hits as f64 / (hits + misses + alarms) as f64 };
    // HSS as (accuracy - chance) / (1 - chance)
    let acc = (hits + nulls) as f64 / n;
    let chance = ((hits + misses) as f64 * (hits + alarms) as f64 + (nulls + misses) as f64 * (nulls + alarms) as f64) / (n * n);
    let hss = if chance == 1.0 { 0.0 } else { (acc - chance) / (1.0 - chance) };
    (csi, hss)
}

#[test]
fn threshold_scaling_and_boundary() {
    let cut = scaled_threshold(16.0, 1.0 / 255.0);
    assert!((cut as f64 - 0.0627).abs() < 1e-4);
    assert!(binarize(&[0.0; 16], cut).iter().all(|b| !b));
    assert_eq!(binarize(&[cut, cut - 1e-6, 1.0], cut), vec![true, false, true]);
    // a raw-scale pixel of exactly 16 normalizes onto the cutoff
    let px = crate::data::normalize(&[16u8], 1, 1, 1, 1.0 / 255.0).unwrap();
    assert_eq!(binarize(px.data(), cut), vec![true]);
}

#[test]
fn confusion_examples() {
    let a = [true, false, true, true, false];
    let c = confusion(&a, &a).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (3, 0, 0, 2));
    let not: Vec<bool> = a.iter().map(|b| !b).collect();
    let c = confusion(&a, &not).unwrap();
    assert_eq!((c.tp, c.tn), (0, 0));
    assert_eq!(c.total(), 5);
    assert!(confusion(&a, &a[..4]).is_err());
    let c = Confusion { tp: 1, fn_: 1, fp: 2, tn: 0 };
    assert_eq!(c.csi(), 0.25);
}

#[test]
fn scores_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let p = rng.gen_range(0.05..0.95);
        let pred: Vec<bool> = (0..64).map(|_| rng.gen_bool(p)).collect();
        let gt: Vec<bool> = (0..64).map(|_| rng.gen_bool(p)).collect();
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c.total(), 64);
        let (csi, hss) = brute(&pred, &gt);
        assert_eq!(c.csi(), csi);
        assert!((c.hss() - hss).abs() < 1e-12, "{} vs {}", c.hss(), hss);
    }
}

#[test]
fn hss_conventions() {
    let gt: Vec<bool> = (0..64).map(|i| i < 32).collect();
    assert_eq!(confusion(&gt, &gt).unwrap().hss(), 1.0);
    // checkerboard against a half split: every cell count is 16
    let board: Vec<bool> = (0..64).map(|i| (i / 8 + i % 8) % 2 == 0).collect();
    let c = confusion(&board, &gt).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (16, 16, 16, 16));
    assert_eq!(c.tp * c.tn, c.fp * c.fn_);
    assert_eq!(c.hss(), 0.0);
    assert_eq!(confusion(&[false; 9], &[false; 9]).unwrap().hss(), 0.0);
    assert_eq!(confusion(&[false; 9], &[false; 9]).unwrap().csi(), 1.0);
}

#[test]
fn pooled_csi_rewards_near_misses() {
    let (h, w) = (16, 16);
    let square = |y: usize, x: usize| {
        let mut f = vec![0.0f32; h * w];
        for dy in 0..2 {
            for dx in 0..2 {
                f[(y + dy) * w + x + dx] = 1.0;
            }
        }
        f
    };
    let gt = square(4, 4);
    let pred = square(4, 6);
    let cut = 0.1;
    let plain = csi(&pred, &gt, cut).unwrap();
    let pooled = pooled_csi(&pred, &gt, h, w, 4, cut).unwrap();
    assert_eq!(plain, 0.0);
    assert!(pooled > plain, "{pooled}");
    assert_eq!(pooled_csi(&[0.0; 256], &[0.0; 256], 16, 16, 4, cut).unwrap(), 1.0);
    assert!(pooled_csi(&gt, &gt, 16, 16, 3, cut).is_err());
    assert_eq!(avg_pool(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2).unwrap(), vec![2.5]);
}

proptest! {
    #[test]
    fn pool_one_is_plain_csi(a in prop::collection::vec(0.0f32..1.0, 64), b in prop::collection::vec(0.0f32..1.0, 64), t in 0usize..6) {
        let cut = scaled_threshold(VIL_THRESHOLDS[t], 1.0 / 255.0);
        prop_assert_eq!(pooled_csi(&a, &b, 8, 8, 1, cut).unwrap(), csi(&a, &b, cut).unwrap());
        let c = csi(&a, &b, cut).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn raising_threshold_never_adds_hits(a in prop::collection::vec(0.0f32..1.0, 64), b in prop::collection::vec(0.0f32..1.0, 64)) {
        let mut prev = u64::MAX;
        for &t in &VIL_THRESHOLDS {
            let cut = scaled_threshold(t, 1.0 / 255.0);
            let c = confusion(&binarize(&a, cut), &binarize(&b, cut)).unwrap();
            prop_assert!(c.tp <= prev);
            prev = c.tp;
        }
    }
}

fn noise_field(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn ssim_properties() {
    let a = noise_field(1, 24 * 24);
    let b = noise_field(2, 24 * 24);
    assert!((ssim(&a, &a, 24, 24).unwrap() - 1.0).abs() < 1e-12);
    let ab = ssim(&a, &b, 24, 24).unwrap();
    assert!((ab - ssim(&b, &a, 24, 24).unwrap()).abs() < 1e-9);
    assert!((-1.0..1.0).contains(&ab));
    // constant images: mu = (0, 1), no variance, so SSIM = C1 / (1 + C1)
    let s = ssim(&[0.0; 256], &[1.0; 256], 16, 16).unwrap();
    let c1 = 1e-4;
    assert!((s - c1 / (1.0 + c1)).abs() < 1e-12, "{s}");
    assert!(ssim(&[0.0; 100], &[0.0; 100], 10, 10).is_err());
}

fn seq(frames: Vec<Vec<f32>>, res: usize) -> FrameSequence {
    let t = frames.len();
    FrameSequence::new(t, res, res, 1, frames.concat()).unwrap()
}

#[test]
fn lead_time_curve_examples() {
    let cuts: Vec<f32> = VIL_THRESHOLDS.iter().map(|&t| scaled_threshold(t, 1.0 / 255.0)).collect();
    let gt = seq((0..6).map(|i| noise_field(i, 64)).collect(), 8);
    let perfect = lead_time_curves(&gt, &gt, &cuts).unwrap();
    assert_eq!(perfect.csi, vec![1.0; 6]);
    assert_eq!(perfect.last_third_csi, 1.0);

    // noise that grows with lead time degrades the scores
    let res = 32;
    let truth: Vec<Vec<f32>> = (0..9).map(|_| noise_field(100, res * res)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pred: Vec<Vec<f32>> = truth
        .iter()
        .enumerate()
        .map(|(i, f)| f.iter().map(|&v| (v + 0.08 * i as f32 * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0)).collect())
        .collect();
    let curves = lead_time_curves(&seq(pred, res), &seq(truth, res), &cuts).unwrap();
    let smooth: Vec<f64> = curves.csi.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", smooth);
    let tail = curves.csi[6..].iter().sum::<f64>() / 3.0;
    assert!((curves.last_third_csi - tail).abs() < 1e-15);
    assert!(lead_time_curves(&gt, &gt.slice(0, 5).unwrap(), &cuts).is_err());
}

#[test]
fn latency_summary() {
    assert_eq!(timed_count(8, 5), 3);
    let s = LatencyStats::from_samples(&[0.3, 0.1, 0.2, 0.6]).unwrap();
    assert_eq!((s.samples, s.min), (4, 0.1));
    assert!((s.median - 0.25).abs() < 1e-15 && (s.mean - 0.3).abs() < 1e-15);
    assert!(LatencyStats::from_samples(&[]).is_err());
}

#[test]
fn report_aggregates_frames_then_events() {
    let res = 16;
    let gt = seq((0..3).map(|i| noise_field(i, res * res)).collect(), res);
    let pred = seq((0..3).map(|i| noise_field(i + 10, res * res)).collect(), res);
    let mut ev = Evaluator::new(&VIL_THRESHOLDS, 1.0 / 255.0, res);
    assert_eq!(ev.pools, vec![4, 16]);
    ev.add_event(&pred, &gt).unwrap();
    ev.add_event(&gt, &gt).unwrap();
    assert_eq!(ev.rows.len(), 2 * 3 * 6);
    let r = ev.report(None).unwrap();
    let first: f64 = ev.rows.iter().filter(|r| r.event == 0 && r.threshold == 16.0).map(|r| r.csi).sum::<f64>() / 3.0;
    assert!((r.per_threshold[0].csi - 0.5 * (first + 1.0)).abs() < 1e-12);
    assert_eq!(r.pooled.len(), 12);
    assert_eq!(r.per_lead_time.csi.len(), 3);
    let mean: f64 = r.per_threshold.iter().map(|s| s.csi).sum::<f64>() / 6.0;
    assert!((r.mean_csi - mean).abs() < 1e-15);
    assert!(Evaluator::new(&VIL_THRESHOLDS, 1.0, 8).report(None).is_err());
}
