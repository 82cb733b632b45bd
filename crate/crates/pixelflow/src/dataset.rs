//! Dataset directories: one subdirectory per split, each event a raw
//! little-endian `f32` file in `[T, H, W, C]` order next to a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use pixelflow_core::data::{
    generate_synthetic_event, slide_windows, DatasetManifest, EventWindow, FrameSequence, Source, Split,
    SyntheticSceneSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{fail, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub dt_minutes: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub grid_spacing_km: f64,
}

fn one() -> f64 {
    1.0
}

/// `dataset.json` of a split: the manifest plus event file stems in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub manifest: DatasetManifest,
    pub events: Vec<String>,
}

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

pub fn write_event(dir: &Path, stem: &str, seq: &FrameSequence, seed: u64) -> Result<()> {
    let (t, h, w, c) = seq.dims();
    let bytes: Vec<u8> = seq.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let raw = dir.join(format!("{stem}.f32"));
    fs::write(&raw, bytes).map_err(Error::io(&raw))?;
    let side = Sidecar { t, h, w, c, dt_minutes: seq.dt_minutes, seed, grid_spacing_km: seq.grid_spacing_km };
    write_json(&dir.join(format!("{stem}.json")), &side)
}

pub fn read_event(dir: &Path, stem: &str) -> Result<FrameSequence> {
    let side: Sidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let raw = dir.join(format!("{stem}.f32"));
    let bytes = fs::read(&raw).map_err(Error::io(&raw))?;
    let n = side.t * side.h * side.w * side.c;
    if bytes.len() != 4 * n {
        fail!(Data, "{}: {} bytes, sidecar promises {}x{}x{}x{} floats", raw.display(), bytes.len(), side.t, side.h, side.w, side.c);
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let seq = FrameSequence::new(side.t, side.h, side.w, side.c, data)
        .map_err(|e| Error::Data(format!("{}: {}", raw.display(), e)))?;
    Ok(seq.with_metadata(side.grid_spacing_km, side.dt_minutes))
}

pub fn write_split(dir: &Path, manifest: &DatasetManifest, events: &[(FrameSequence, u64)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut stems = Vec::with_capacity(events.len());
    for (i, (seq, seed)) in events.iter().enumerate() {
        let stem = format!("event_{i:04}");
        write_event(dir, &stem, seq, *seed)?;
        stems.push(stem);
    }
    write_json(&dir.join("dataset.json"), &SplitIndex { manifest: manifest.clone(), events: stems })
}

pub fn read_split(dir: &Path) -> Result<(DatasetManifest, Vec<FrameSequence>)> {
    let index: SplitIndex = read_json(&dir.join("dataset.json"))?;
    if index.events.len() != index.manifest.sample_count {
        fail!(Data, "{}: manifest counts {} events, index lists {}", dir.display(), index.manifest.sample_count, index.events.len());
    }
    let events = index.events.iter().map(|s| read_event(dir, s)).collect::<Result<_>>()?;
    Ok((index.manifest, events))
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

/// Training/evaluation windows of every event in a split.
pub fn split_windows(root: &Path, split: Split, t_in: usize, t_out: usize, stride: usize) -> Result<Vec<EventWindow>> {
    let (_, events) = read_split(&split_dir(root, split))?;
    let mut out = Vec::new();
    for e in &events {
        out.extend(slide_windows(e, t_in, t_out, stride)?);
    }
    if out.is_empty() {
        fail!(Data, "{} split of {} has no windows", split.name(), root.display());
    }
    Ok(out)
}

/// Writes every split of the configured dataset under `root`.
pub fn generate(cfg: &RunConfig, root: &Path) -> Result<()> {
    let d = &cfg.data;
    let counts = [d.train_events, d.val_events, d.test_events];
    let res = cfg.model.resolution;
    match d.source {
        Source::Synthetic => {
            let mut seed = d.seed.wrapping_mul(1_000_003);
            for (split, &n) in SPLITS.iter().zip(&counts) {
                let mut events = Vec::with_capacity(n);
                for _ in 0..n {
                    let spec = SyntheticSceneSpec::sample(seed, res, &d.scene);
                    let seq = generate_synthetic_event(&spec, d.frames_per_event, res, res)?;
                    events.push((seq.with_metadata(d.grid_spacing_km, d.dt_minutes), seed));
                    seed += 1;
                }
                write_split(&split_dir(root, *split), &DatasetManifest::new(*split, d.source, n), &events)?;
            }
        }
        source => {
            if d.hdf5_path.is_empty() {
                fail!(Config, "data.hdf5_path is required for source {:?}", source);
            }
            let scale = source.default_scale_factor();
            let events = read_archive(Path::new(&d.hdf5_path), scale, res, d.dt_minutes, d.grid_spacing_km)?;
            let mut rest = events.into_iter();
            // chronological split: the earliest events train
            for (split, &n) in SPLITS.iter().zip(&counts) {
                let chunk: Vec<(FrameSequence, u64)> = rest.by_ref().take(n).map(|(_, s)| (s, 0)).collect();
                if chunk.len() < n {
                    fail!(Data, "{} holds too few events for {} {} events", d.hdf5_path, n, split.name());
                }
                let mut manifest = DatasetManifest::new(*split, source, n);
                manifest.scale_factor = scale;
                write_split(&split_dir(root, *split), &manifest, &chunk)?;
            }
        }
    }
    Ok(())
}

/// Events of an archive, ordered by group name. Each group holds an integer
/// dataset `vil` of shape `[T, H, W]`; frames are scaled, clamped and
/// area-averaged to `resolution`.
#[cfg(feature = "hdf5")]
pub fn read_archive(path: &Path, scale: f64, resolution: usize, dt_minutes: f64, grid_km: f64) -> Result<Vec<(String, FrameSequence)>> {
    use pixelflow_core::data::{area_downsample, normalize};

    let h5 = |e: hdf5::Error| Error::Data(format!("{}: {}", path.display(), e));
    let file = hdf5::File::open(path).map_err(h5)?;
    let mut names = file.member_names().map_err(h5)?;
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let Ok(group) = file.group(&name) else { continue };
        let ds = group.dataset("vil").map_err(|e| Error::Data(format!("{}: group {}: {}", path.display(), name, e)))?;
        use hdf5::types::TypeDescriptor as T;
        if !matches!(ds.dtype().and_then(|t| t.to_descriptor()).map_err(h5)?, T::Integer(_) | T::Unsigned(_)) {
            fail!(Data, "{}: {}/vil is not an integer dataset", path.display(), name);
        }
        let shape = ds.shape();
        if shape.len() != 3 {
            fail!(Data, "{}: {}/vil has shape {:?}, expected [T, H, W]", path.display(), name, shape);
        }
        let raw: Vec<i32> = ds.read_raw().map_err(h5)?;
        let seq = normalize(&raw, shape[0], shape[1], shape[2], scale)?.with_metadata(grid_km, dt_minutes);
        let seq = if shape[1] == resolution { seq } else { area_downsample(&seq, resolution)? };
        out.push((name, seq));
    }
    if out.is_empty() {
        fail!(Data, "{}: no event groups", path.display());
    }
    Ok(out)
}

#[cfg(not(feature = "hdf5"))]
pub fn read_archive(path: &Path, _: f64, _: usize, _: f64, _: f64) -> Result<Vec<(String, FrameSequence)>> {
    fail!(Config, "{}: built without HDF5 support", path.display())
}
