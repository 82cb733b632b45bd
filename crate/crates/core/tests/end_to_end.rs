use pixelflow_core::data::{generate_synthetic_event, slide_windows, EventWindow, FrameSequence, SyntheticSceneSpec};
use pixelflow_core::metrics::{lead_time_curves, scaled_threshold, Evaluator, VIL_THRESHOLDS};
use pixelflow_core::pipeline::{AdamWConfig, ModelConfig, Phase, PixelFlowCast, TrainConfig, Trainer};
use pixelflow_core::pmf::{Extraction, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn event(seed: u64, frames: usize, res: usize) -> FrameSequence {
    generate_synthetic_event(&SyntheticSceneSpec::sample(seed, res, &Default::default()), frames, res, res).unwrap()
}

#[test]
fn window_counts_follow_the_stride() {
    let seq = event(1, 20, 8);
    assert_eq!(slide_windows(&seq, 4, 8, 1).unwrap().len(), 9);
    assert_eq!(slide_windows(&seq, 4, 8, 4).unwrap().len(), 3);
    let w = &slide_windows(&seq, 4, 8, 4).unwrap()[1];
    assert_eq!(w.past.data(), seq.slice(4, 4).unwrap().data());
    assert_eq!(w.future.data(), seq.slice(8, 8).unwrap().data());
    assert!(slide_windows(&seq, 12, 12, 1).is_err());
}

#[test]
fn pretrain_then_joint_then_forecast() {
    let cfg = ModelConfig::tiny(2, 4, 8);
    let windows: Vec<EventWindow> = (0..2).flat_map(|s| slide_windows(&event(s, 8, 8), 2, 4, 1).unwrap()).collect();
    let train = TrainConfig { optimizer: AdamWConfig { base_lr: 2e-3, ..Default::default() }, ..Default::default() };

    let mut pre = Trainer::new(PixelFlowCast::<f32>::new(&cfg, 0).unwrap(), &train, Phase::Pretrain, 30).unwrap();
    let mut coarse = Vec::new();
    for _ in 0..5 {
        coarse.extend(pre.run_epoch(&windows, |_| {}).unwrap().into_iter().map(|l| l.coarse));
    }
    let (head, tail) = (coarse[..6].iter().sum::<f64>(), coarse[coarse.len() - 6..].iter().sum::<f64>());
    assert!(tail < head, "{head} -> {tail}");

    let mut joint = Trainer::new(pre.model, &train, Phase::Joint, 12).unwrap();
    let losses = joint.run_epoch(&windows, |_| {}).unwrap();
    assert_eq!(losses.len(), windows.len());
    assert!(losses.iter().all(|l| l.total.is_finite() && (1..=2).contains(&l.k)));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for extraction in [Extraction::NoiseFree, Extraction::Accumulation] {
        let sampler = SamplerConfig { steps: 2, extraction };
        let (c, r) = joint.model.forecast_frames(&windows[0].past, &sampler, &mut rng).unwrap();
        assert_eq!((c.len(), r.len(), r.resolution()), (4, 4, 8));
        assert!(r.is_normalized());
    }
}

#[test]
fn perfect_forecasts_score_one_and_noise_degrades() {
    let gt = event(7, 12, 16);
    let mut ev = Evaluator::new(&VIL_THRESHOLDS, 1.0 / 255.0, 16);
    ev.add_event(&gt, &gt).unwrap();
    let r = ev.report(None).unwrap();
    assert_eq!(r.pools, vec![4, 16]);
    assert_eq!(r.ssim, 1.0);
    assert!(r.per_lead_time.csi.iter().all(|&v| v == 1.0));

    // noise that grows with lead time, averaged over seeds to smooth it
    let cuts: Vec<f32> = [16.0, 74.0].iter().map(|&t| scaled_threshold(t, 1.0 / 255.0)).collect();
    let mut curve = vec![0.0; gt.len()];
    for seed in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = gt.frame_len();
        let noisy: Vec<f32> =
            gt.data().iter().enumerate().map(|(i, &v)| (v + 0.06 * (i / n) as f32 * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0)).collect();
        let pred = FrameSequence::new(gt.len(), 16, 16, 1, noisy).unwrap();
        for (c, v) in curve.iter_mut().zip(lead_time_curves(&pred, &gt, &cuts).unwrap().csi) {
            *c += v / 8.0;
        }
    }
    let smooth: Vec<f64> = curve.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{smooth:?}");
    assert!(smooth.last().unwrap() < &smooth[0]);
}
