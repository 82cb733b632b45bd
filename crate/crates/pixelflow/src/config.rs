//! The declarative run configuration: one TOML file, every key defaulted,
//! `--set a.b=value` overrides checked against the known keys.

use std::path::Path;

use pixelflow_core::data::{SceneRanges, Source};
use pixelflow_core::metrics::VIL_THRESHOLDS;
use pixelflow_core::pipeline::{ModelConfig, Precision, TrainConfig};
use pixelflow_core::pmf::SamplerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{fail, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Source,
    pub seed: u64,
    pub train_events: usize,
    pub val_events: usize,
    pub test_events: usize,
    pub frames_per_event: usize,
    pub dt_minutes: f64,
    pub grid_spacing_km: f64,
    pub scene: SceneRanges,
    /// Stride between training windows.
    pub window_stride: usize,
    /// Archive to ingest when `source` is not synthetic; values are scaled by
    /// the source's raw-to-unit factor.
    pub hdf5_path: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            seed: 0,
            train_events: 16,
            val_events: 4,
            test_events: 4,
            frames_per_event: 48,
            dt_minutes: 5.0,
            grid_spacing_km: 1.0,
            scene: SceneRanges::default(),
            window_stride: 1,
            hdf5_path: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Thresholds on the raw 0..255 scale.
    pub thresholds: Vec<f64>,
    /// Multiplies each threshold before binarizing normalized fields.
    pub threshold_scale: f64,
    /// Stride between evaluation windows within an event.
    pub window_stride: usize,
    /// Evaluate at most this many windows; 0 means all.
    pub max_windows: usize,
    /// Seed of the sampler noise at inference.
    pub sample_seed: u64,
    pub bench_warmup: usize,
    /// Total benchmark runs including warm-up.
    pub bench_samples: usize,
    pub ablate_steps: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: VIL_THRESHOLDS.to_vec(),
            threshold_scale: 1.0 / 255.0,
            window_stride: 12,
            max_windows: 0,
            sample_seed: 0,
            bench_warmup: 5,
            bench_samples: 15,
            ablate_steps: vec![1, 5, 10, 15, 20],
        }
    }
}

/// Inputs of the commands that consume earlier artifacts. Empty means unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory written by `gen-data`.
    pub data: String,
    pub checkpoint: String,
    /// Forecast directory written by `forecast`.
    pub forecast: String,
    /// `report.json` files to plot.
    pub reports: Vec<String>,
    /// Legend labels for `reports`; defaults to the parent directory names.
    pub labels: Vec<String>,
    /// `loss.csv` files to plot.
    pub losses: Vec<String>,
    /// Load checkpoints whose configuration fingerprint differs.
    pub allow_fingerprint_mismatch: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Copies `src` onto `dst`; every key in `src` must already exist in `dst`.
fn merge(dst: &mut Value, src: Value, at: &str) -> Result<()> {
    match (dst, src) {
        (Value::Table(d), Value::Table(s)) => {
            for (k, v) in s {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => fail!(Config, "unknown key `{}`", path),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = coerce(d, s, at)?;
            Ok(())
        }
    }
}

/// `new` retyped to the type of `old` where that is lossless.
fn coerce(old: &Value, new: Value, at: &str) -> Result<Value> {
    Ok(match (old, new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (o, v) if std::mem::discriminant(o) == std::mem::discriminant(&v) => v,
        (o, v) => fail!(Config, "`{}` expects a {}, got a {}", at, o.type_str(), v.type_str()),
    })
}

/// Parses the right-hand side of `--set`: any TOML value, or a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        fail!(Config, "override `{}` is not of the form key=value", assignment);
    };
    let key = key.trim();
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = match slot.as_table_mut().and_then(|t| t.get_mut(part)) {
            Some(v) => v,
            None => fail!(Config, "unknown key `{}` in override", key),
        };
    }
    let mut value = parse_value(raw.trim());
    if let (Value::String(_), v) = (&*slot, &value) {
        if !v.is_str() {
            value = Value::String(raw.trim().to_string());
        }
    }
    *slot = coerce(slot, value, key)?;
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then each override in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
            let file: Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
            merge(&mut root, file, "")?;
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sampler.steps == 0 {
            fail!(Config, "sampler.steps must be >= 1");
        }
        let d = &self.data;
        if d.frames_per_event < self.model.t_in + self.model.t_out {
            fail!(Config, "data.frames_per_event = {} is shorter than t_in + t_out = {}", d.frames_per_event, self.model.t_in + self.model.t_out);
        }
        if d.window_stride == 0 || self.eval.window_stride == 0 {
            fail!(Config, "window strides must be >= 1");
        }
        if !(self.eval.threshold_scale > 0.0) {
            fail!(Config, "eval.threshold_scale must be positive");
        }
        if self.eval.thresholds.is_empty() || self.eval.ablate_steps.contains(&0) {
            fail!(Config, "eval.thresholds must be nonempty and ablation steps >= 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Hash of everything that fixes the parameter layout and dtype.
pub fn fingerprint(model: &ModelConfig, precision: Precision) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("config serializes"));
    h.update(serde_json::to_vec(&precision).expect("config serializes"));
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with(overrides: &[&str]) -> Result<RunConfig> {
        RunConfig::resolve(None, &overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_are_typed_and_checked() {
        let cfg = with(&["train.optimizer.base_lr=2e-3", "model.resolution=32", "sampler.extraction=accumulation", "train.epochs=3"]).unwrap();
        assert_eq!(cfg.train.optimizer.base_lr, 2e-3);
        assert_eq!(cfg.model.resolution, 32);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.sampler.extraction, pixelflow_core::pmf::Extraction::Accumulation);
        // integers widen to floats
        assert_eq!(with(&["train.grad_clip=2"]).unwrap().train.grad_clip, 2.0);
        assert_eq!(with(&["model.kancondnet.level_channels=[12, 24, 48, 96]"]).unwrap().model.kancondnet.level_channels, vec![12, 24, 48, 96]);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for bad in ["train.no_such_key=1", "nope=1", "train.epochs=abc", "train.epochs", "model=3", "train.loss_weights=[1.0, 0.0]", "sampler.extraction=sideways"] {
            let err = with(&[bad]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
    }

    #[test]
    fn file_keys_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nepochs = 2\n[model.xprednet]\nbase_channels = 8\n").unwrap();
        let cfg = RunConfig::resolve(Some(&p), &[]).unwrap();
        assert_eq!((cfg.train.epochs, cfg.model.xprednet.base_channels), (2, 8));
        std::fs::write(&p, "[train]\nepoch = 2\n").unwrap();
        let err = RunConfig::resolve(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("train.epoch"), "{err}");
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.xprednet.base_channels = 32;
        assert_eq!(fingerprint(&a, Precision::Float32), fingerprint(&a.clone(), Precision::Float32));
        assert_ne!(fingerprint(&a, Precision::Float32), fingerprint(&b, Precision::Float32));
        assert_ne!(fingerprint(&a, Precision::Float32), fingerprint(&a, Precision::Float64));
    }
}
