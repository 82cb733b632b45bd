//! Command dispatch. Every command writes into a staging directory next to
//! `--out` and moves it into place only on success, together with
//! `config.resolved.toml` and `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use pixelflow_core::data::{DatasetManifest, EventWindow, FrameSequence, Split};
use pixelflow_core::metrics::{Evaluator, MetricReport};
use pixelflow_core::pipeline::{Phase, PixelFlowCast, Precision, Trainer};
use pixelflow_core::pmf::{Extraction, SamplerConfig};
use pixelflow_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::latency_bench;
use crate::checkpoint;
use crate::config::{fingerprint, RunConfig};
use crate::dataset::{self, read_split, split_windows, write_json, write_split};
use crate::error::{fail, Error, Result};
use crate::plot::{lead_time_charts, loss_chart};
use crate::report::{loss_row, metrics_csv, write_text, LOSS_HEADER};

pub const DEVICE_VAR: &str = "PIXELFLOW_DEVICE";
pub const CHECKPOINT_FILE: &str = "checkpoint.pfc";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    Pretrain,
    Train,
    Forecast,
    Evaluate,
    Bench,
    AblateSteps,
    AblateExtraction,
    Plot,
}

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    /// Sets `data.seed` for `gen-data` and `train.seed` otherwise.
    pub seed: Option<u64>,
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub data_seed: u64,
    pub train_seed: u64,
    pub sample_seed: u64,
    pub fingerprint: String,
    /// Rerunning with `--config` pointing here reproduces the run.
    pub config: String,
    pub artifacts: Vec<String>,
}

/// Only the CPU exists; `auto` and unset select it.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Ok(v) if v.is_empty() || v.eq_ignore_ascii_case("cpu") || v.eq_ignore_ascii_case("auto") => Ok(()),
        Ok(v) => fail!(Config, "{}={} is not available; this build runs on cpu", DEVICE_VAR, v),
        Err(e) => fail!(Config, "{}: {}", DEVICE_VAR, e),
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(p.exists())
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!(".{name}.staging-{}", std::process::id()))
}

/// Resolves the configuration, runs the command and publishes the output
/// directory. Returns the manifest that was written.
pub fn run(spec: &RunSpec) -> Result<Manifest> {
    check_device()?;
    let mut overrides = spec.overrides.clone();
    if let Some(seed) = spec.seed {
        let key = if spec.command == Command::GenData { "data.seed" } else { "train.seed" };
        overrides.push(format!("{key}={seed}"));
    }
    let cfg = RunConfig::resolve(spec.config.as_deref(), &overrides)?;
    if spec.out.as_os_str().is_empty() {
        fail!(Config, "--out is required");
    }
    if is_nonempty_dir(&spec.out) && !spec.force {
        fail!(Config, "{} is not empty; pass --force to replace it", spec.out.display());
    }
    let stage = staging_dir(&spec.out);
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(Error::io(&stage))?;
    }
    fs::create_dir_all(&stage).map_err(Error::io(&stage))?;
    let result = execute(spec.command, &cfg, &stage).and_then(|mut artifacts| {
        artifacts.sort();
        let manifest = Manifest {
            command: spec.command,
            version: env!("CARGO_PKG_VERSION").into(),
            data_seed: cfg.data.seed,
            train_seed: cfg.train.seed,
            sample_seed: cfg.eval.sample_seed,
            fingerprint: fingerprint(&cfg.model, cfg.train.precision),
            config: "config.resolved.toml".into(),
            artifacts,
        };
        write_text(&stage.join("config.resolved.toml"), &cfg.to_toml())?;
        write_json(&stage.join("manifest.json"), &manifest)?;
        if spec.out.exists() {
            fs::remove_dir_all(&spec.out).map_err(Error::io(&spec.out))?;
        }
        fs::rename(&stage, &spec.out).map_err(Error::io(&spec.out))?;
        Ok(manifest)
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&stage);
    }
    result
}

fn execute(command: Command, cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    macro_rules! typed {
        ($f:ident) => {
            match cfg.train.precision {
                Precision::Float32 => $f::<f32>(cfg, out),
                Precision::Float64 => $f::<f64>(cfg, out),
            }
        };
    }
    match command {
        Command::GenData => {
            dataset::generate(cfg, out)?;
            Ok(dataset::SPLITS.iter().map(|s| format!("{}/", s.name())).collect())
        }
        Command::Pretrain => typed!(pretrain),
        Command::Train => typed!(train),
        Command::Forecast => typed!(forecast),
        Command::Evaluate => evaluate(cfg, out),
        Command::Bench => typed!(bench),
        Command::AblateSteps => typed!(ablate_steps),
        Command::AblateExtraction => typed!(ablate_extraction),
        Command::Plot => plot(cfg, out),
    }
}

fn required<'a>(value: &'a str, key: &str) -> Result<&'a Path> {
    if value.is_empty() {
        fail!(Config, "paths.{} is required for this command", key);
    }
    Ok(Path::new(value))
}

fn load_model<S: Real>(cfg: &RunConfig) -> Result<PixelFlowCast<S>> {
    let path = required(&cfg.paths.checkpoint, "checkpoint")?;
    let fp = fingerprint(&cfg.model, cfg.train.precision);
    Ok(checkpoint::load::<S>(path, Some(&fp), cfg.paths.allow_fingerprint_mismatch)?.model)
}

fn train_windows(cfg: &RunConfig) -> Result<Vec<EventWindow>> {
    let root = required(&cfg.paths.data, "data")?;
    split_windows(root, Split::Train, cfg.model.t_in, cfg.model.t_out, cfg.data.window_stride)
}

fn test_windows(cfg: &RunConfig) -> Result<Vec<EventWindow>> {
    let root = required(&cfg.paths.data, "data")?;
    let mut w = split_windows(root, Split::Test, cfg.model.t_in, cfg.model.t_out, cfg.eval.window_stride)?;
    if cfg.eval.max_windows > 0 {
        w.truncate(cfg.eval.max_windows);
    }
    Ok(w)
}

fn fit<S: Real>(model: PixelFlowCast<S>, cfg: &RunConfig, phase: Phase, epochs: usize, out: &Path) -> Result<Vec<String>> {
    let windows = train_windows(cfg)?;
    let total = Trainer::<S>::steps_for(windows.len(), cfg.train.batch_size, epochs);
    let mut trainer = Trainer::new(model, &cfg.train, phase, total)?;
    let label = match phase {
        Phase::Pretrain => "pretrain",
        Phase::Joint => "joint",
    };
    let mut csv = format!("{LOSS_HEADER}\n");
    for epoch in 0..epochs {
        let losses = trainer.run_epoch(&windows, |l| csv.push_str(&loss_row(label, l)))?;
        let mean = losses.iter().map(|l| l.total).sum::<f64>() / losses.len() as f64;
        eprintln!("{label} epoch {}/{}: mean loss {:.6}", epoch + 1, epochs, mean);
    }
    write_text(&out.join("loss.csv"), &csv)?;
    checkpoint::save_trainer(&out.join(CHECKPOINT_FILE), &trainer)?;
    Ok(vec!["loss.csv".into(), CHECKPOINT_FILE.into()])
}

fn pretrain<S: Real>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    if cfg.train.pretrain_epochs == 0 {
        fail!(Config, "train.pretrain_epochs must be >= 1 to pretrain");
    }
    let model = PixelFlowCast::<S>::new(&cfg.model, cfg.train.seed)?;
    fit(model, cfg, Phase::Pretrain, cfg.train.pretrain_epochs, out)
}

fn train<S: Real>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let model = if cfg.train.cold_start {
        if !cfg.paths.checkpoint.is_empty() {
            fail!(Config, "paths.checkpoint is set but train.cold_start = true; set train.cold_start = false to start from it");
        }
        PixelFlowCast::<S>::new(&cfg.model, cfg.train.seed)?
    } else {
        load_model::<S>(cfg)?
    };
    fit(model, cfg, Phase::Joint, cfg.train.epochs, out)
}

/// Coarse and refined forecasts of `windows`; the sampler noise restarts
/// from `seed` on every call.
fn forecast_windows<S: Real>(
    model: &PixelFlowCast<S>,
    windows: &[EventWindow],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<(FrameSequence, FrameSequence)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows.iter().map(|w| Ok(model.forecast_frames(&w.past, sampler, &mut rng)?)).collect()
}

fn forecast<S: Real>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let model = load_model::<S>(cfg)?;
    let windows = test_windows(cfg)?;
    let (test, _) = read_split(&dataset::split_dir(Path::new(&cfg.paths.data), Split::Test))?;
    let preds = forecast_windows(&model, &windows, &cfg.sampler, cfg.eval.sample_seed)?;
    let manifest = DatasetManifest { sample_count: windows.len(), ..test };
    let truth: Vec<(FrameSequence, u64)> = windows.iter().map(|w| (w.future.clone(), 0)).collect();
    let (coarse, refined): (Vec<_>, Vec<_>) = preds.into_iter().map(|(c, r)| ((c, 0), (r, 0))).unzip();
    write_split(&out.join("truth"), &manifest, &truth)?;
    write_split(&out.join("coarse"), &manifest, &coarse)?;
    write_split(&out.join("refined"), &manifest, &refined)?;
    Ok(vec!["coarse/".into(), "refined/".into(), "truth/".into()])
}

fn evaluator(cfg: &RunConfig, resolution: usize) -> Evaluator {
    Evaluator::new(&cfg.eval.thresholds, cfg.eval.threshold_scale, resolution)
}

fn score(cfg: &RunConfig, preds: &[FrameSequence], truth: &[FrameSequence]) -> Result<Evaluator> {
    if preds.len() != truth.len() || truth.is_empty() {
        fail!(Data, "{} forecasts for {} ground-truth sequences", preds.len(), truth.len());
    }
    let mut ev = evaluator(cfg, truth[0].resolution());
    for (p, g) in preds.iter().zip(truth) {
        ev.add_event(p, g)?;
    }
    Ok(ev)
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let root = required(&cfg.paths.forecast, "forecast")?;
    let (_, truth) = read_split(&root.join("truth"))?;
    let mut artifacts = Vec::new();
    for (which, prefix) in [("refined", ""), ("coarse", "coarse_")] {
        let (_, preds) = read_split(&root.join(which))?;
        let ev = score(cfg, &preds, &truth)?;
        let report = ev.report(None)?;
        write_text(&out.join(format!("{prefix}metrics.csv")), &metrics_csv(&ev.rows, &ev.pools))?;
        write_json(&out.join(format!("{prefix}report.json")), &report)?;
        artifacts.push(format!("{prefix}metrics.csv"));
        artifacts.push(format!("{prefix}report.json"));
    }
    Ok(artifacts)
}

fn bench<S: Real>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let model = load_model::<S>(cfg)?;
    let inputs: Vec<FrameSequence> = test_windows(cfg)?.into_iter().map(|w| w.past).collect();
    let e = &cfg.eval;
    let r = latency_bench(&model, &inputs, &cfg.sampler, e.bench_warmup, e.bench_samples, e.sample_seed)?;
    eprintln!("N = {}: mean {:.4} s, median {:.4} s, min {:.4} s per forecast", r.steps, r.stats.mean, r.stats.median, r.stats.min);
    write_json(&out.join("latency.json"), &r)?;
    Ok(vec!["latency.json".into()])
}

/// One ablation row: the variant's label and its refined-forecast report.
fn ablation_csv(label: &str, rows: &[(String, MetricReport)]) -> String {
    let pools = rows.first().map(|(_, r)| r.pools.clone()).unwrap_or_default();
    let mut s = format!("{label},mean_csi,mean_hss,ssim,last_third_csi,last_third_hss");
    for p in &pools {
        s.push_str(&format!(",pooled_csi_{p}"));
    }
    s.push('\n');
    for (name, r) in rows {
        let l = &r.per_lead_time;
        s.push_str(&format!("{name},{},{},{},{},{}", r.mean_csi, r.mean_hss, r.ssim, l.last_third_csi, l.last_third_hss));
        for p in &pools {
            let v: Vec<f64> = r.pooled.iter().filter(|x| x.pool == *p).map(|x| x.csi).collect();
            s.push_str(&format!(",{}", v.iter().sum::<f64>() / v.len() as f64));
        }
        s.push('\n');
    }
    s
}

fn ablate<S: Real>(cfg: &RunConfig, out: &Path, stem: &str, label: &str, variants: Vec<(String, SamplerConfig)>) -> Result<Vec<String>> {
    let model = load_model::<S>(cfg)?;
    let windows = test_windows(cfg)?;
    let truth: Vec<FrameSequence> = windows.iter().map(|w| w.future.clone()).collect();
    let mut rows = Vec::with_capacity(variants.len());
    for (name, sampler) in variants {
        let refined: Vec<FrameSequence> =
            forecast_windows(&model, &windows, &sampler, cfg.eval.sample_seed)?.into_iter().map(|(_, r)| r).collect();
        let report = score(cfg, &refined, &truth)?.report(None)?;
        eprintln!("{label} = {name}: mean CSI {:.4}", report.mean_csi);
        rows.push((name, report));
    }
    write_text(&out.join(format!("{stem}.csv")), &ablation_csv(label, &rows))?;
    write_json(&out.join(format!("{stem}.json")), &rows)?;
    Ok(vec![format!("{stem}.csv"), format!("{stem}.json")])
}

fn ablate_steps<S: Real>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let variants = cfg.eval.ablate_steps.iter().map(|&n| (n.to_string(), SamplerConfig { steps: n, ..cfg.sampler })).collect();
    ablate::<S>(cfg, out, "ablate_steps", "steps", variants)
}

fn ablate_extraction<S: Real>(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let variants = [("noise_free", Extraction::NoiseFree), ("accumulation", Extraction::Accumulation)]
        .into_iter()
        .map(|(n, e)| (n.to_string(), SamplerConfig { extraction: e, ..cfg.sampler }))
        .collect();
    ablate::<S>(cfg, out, "ablate_extraction", "extraction", variants)
}

/// Labels default to the name of the directory holding each file.
fn labelled<'a>(files: &'a [String], labels: &[String]) -> Result<Vec<(String, &'a Path)>> {
    if !labels.is_empty() && labels.len() != files.len() {
        fail!(Config, "{} labels for {} files", labels.len(), files.len());
    }
    Ok(files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = Path::new(f);
            let label = labels.get(i).cloned().unwrap_or_else(|| {
                p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{i}"))
            });
            (label, p)
        })
        .collect())
}

fn plot(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let p = &cfg.paths;
    if p.reports.is_empty() && p.losses.is_empty() {
        fail!(Config, "paths.reports or paths.losses must list files to plot");
    }
    let mut artifacts = Vec::new();
    if !p.reports.is_empty() {
        let [csi, hss] = lead_time_charts(&labelled(&p.reports, &p.labels)?)?;
        csi.emit(out, "lead_time_csi")?;
        hss.emit(out, "lead_time_hss")?;
        artifacts.extend(["lead_time_csi.csv", "lead_time_csi.svg", "lead_time_hss.csv", "lead_time_hss.svg"].map(String::from));
    }
    if !p.losses.is_empty() {
        let labels = if p.reports.is_empty() { p.labels.as_slice() } else { &[] };
        loss_chart(&labelled(&p.losses, labels)?)?.emit(out, "loss")?;
        artifacts.extend(["loss.csv", "loss.svg"].map(String::from));
    }
    Ok(artifacts)
}
