//! Wall-clock latency of complete forecasts at batch size 1.

use std::time::Instant;

use pixelflow_core::data::FrameSequence;
use pixelflow_core::metrics::LatencyStats;
use pixelflow_core::pipeline::{autoregressive_forecast, ForecastEvent, PixelFlowCast};
use pixelflow_core::pmf::SamplerConfig;
use pixelflow_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{fail, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub steps: usize,
    pub warmup: usize,
    pub stats: LatencyStats,
    /// Sampler network calls of each window of the last run.
    pub calls_per_window: Vec<usize>,
}

/// Runs `samples` full-horizon forecasts, cycling through `inputs`, and times
/// all but the first `warmup`. Each timed region ends only after the output
/// has been materialized, so nothing is left in flight.
pub fn latency_bench<S: Real>(
    model: &PixelFlowCast<S>,
    inputs: &[FrameSequence],
    sampler: &SamplerConfig,
    warmup: usize,
    samples: usize,
    seed: u64,
) -> Result<BenchResult> {
    if inputs.is_empty() {
        fail!(Data, "latency benchmark needs at least one input window");
    }
    if samples <= warmup {
        fail!(Config, "{} benchmark samples leave nothing to time after {} warm-up runs", samples, warmup);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.config.k();
    let mut timings = Vec::with_capacity(samples - warmup);
    let mut calls = vec![0; k];
    for i in 0..samples {
        let past = inputs[i % inputs.len()].to_tensor::<S>();
        calls.iter_mut().for_each(|c| *c = 0);
        let start = Instant::now();
        let out = autoregressive_forecast(model.stages(), &past, model.config.t_out, sampler, &mut rng, |e| {
            if let ForecastEvent::NetworkCall { k, .. } = e {
                calls[k - 1] += 1;
            }
        })?;
        std::hint::black_box(out.refined.data());
        let elapsed = start.elapsed().as_secs_f64();
        if i >= warmup {
            timings.push(elapsed);
        }
    }
    Ok(BenchResult { steps: sampler.steps, warmup, stats: LatencyStats::from_samples(&timings)?, calls_per_window: calls })
}
