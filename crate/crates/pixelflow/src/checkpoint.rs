//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then little-endian weight blobs in named sections,
//! each with its own CRC32.

use std::fs;
use std::path::Path;

use pixelflow_core::nn::ParamStore;
use pixelflow_core::pipeline::{AdamW, ModelConfig, Phase, PixelFlowCast, Precision, TrainConfig, Trainer};
use pixelflow_core::{Real, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::fingerprint;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PXFLCKP1";
const STAGES: [&str; 3] = ["backbone", "kancondnet", "xprednet"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    /// Byte offset from the start of the blob area.
    pub offset: u64,
    pub bytes: u64,
    pub crc32: u32,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub pretrain: bool,
    pub step: usize,
    pub optimizer_step: u64,
    pub schedule_total: usize,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub fingerprint: String,
    pub dtype: Precision,
    pub model: ModelConfig,
    pub train: Option<TrainState>,
    pub sections: Vec<Section>,
}

/// A loaded checkpoint. `optimizer` and `rng` are present when it was saved
/// from a trainer.
pub struct Checkpoint<S: Real> {
    pub header: Header,
    pub model: PixelFlowCast<S>,
    pub optimizer: Option<AdamW<S>>,
    pub rng: Option<ChaCha8Rng>,
}

fn dtype_of<S: Real>() -> Precision {
    if core::mem::size_of::<S>() == 4 {
        Precision::Float32
    } else {
        Precision::Float64
    }
}

fn encode<S: Real>(tensors: &[(&str, &Tensor<S>)], name: &str, blob: &mut Vec<u8>) -> Section {
    let start = blob.len();
    let f32s = dtype_of::<S>() == Precision::Float32;
    for (_, t) in tensors {
        for &v in t.data() {
            if f32s {
                blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            } else {
                blob.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
    }
    let bytes = &blob[start..];
    Section {
        name: name.into(),
        offset: start as u64,
        bytes: bytes.len() as u64,
        crc32: crc32fast::hash(bytes),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    }
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Option<ChaCha8Rng> {
    use rand::SeedableRng;
    if s.seed.len() != 64 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).ok()?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().ok()?);
    Some(rng)
}

fn write_atomic(path: &Path, header: &Header, blob: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(blob);
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &out).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

fn stage_tensors<'a, S: Real>(store: &'a ParamStore<S>, stage: &str) -> Vec<(&'a str, &'a Tensor<S>)> {
    let prefix = format!("{stage}.");
    store.iter().filter(|(_, n, _)| n.starts_with(&prefix)).map(|(_, n, t)| (n, t)).collect()
}

fn build<S: Real>(model: &PixelFlowCast<S>, train: Option<(TrainState, &AdamW<S>)>) -> (Header, Vec<u8>) {
    let mut blob = Vec::new();
    let mut sections: Vec<Section> =
        STAGES.iter().map(|s| encode(&stage_tensors(&model.store, s), &format!("weights.{s}"), &mut blob)).collect();
    let train = train.map(|(state, opt)| {
        let names: Vec<&str> = model.store.iter().map(|(_, n, _)| n).collect();
        for (label, moments) in [("optimizer.m", &opt.m), ("optimizer.v", &opt.v)] {
            let t: Vec<(&str, &Tensor<S>)> = names.iter().copied().zip(moments.iter()).collect();
            sections.push(encode(&t, label, &mut blob));
        }
        state
    });
    let dtype = dtype_of::<S>();
    let header = Header { fingerprint: fingerprint(&model.config, dtype), dtype, model: model.config.clone(), train, sections };
    (header, blob)
}

/// Weights only.
pub fn save_model<S: Real>(path: &Path, model: &PixelFlowCast<S>) -> Result<()> {
    let (header, blob) = build(model, None);
    write_atomic(path, &header, &blob)
}

/// Weights, optimizer moments, step counters and the RNG stream.
pub fn save_trainer<S: Real>(path: &Path, trainer: &Trainer<S>) -> Result<()> {
    let state = TrainState {
        config: trainer.config.clone(),
        pretrain: trainer.phase == Phase::Pretrain,
        step: trainer.step,
        optimizer_step: trainer.optimizer.step,
        schedule_total: trainer.schedule.total,
        rng: rng_state(&trainer.rng),
    };
    let (header, blob) = build(&trainer.model, Some((state, &trainer.optimizer)));
    write_atomic(path, &header, &blob)
}

fn decode<S: Real>(bytes: &[u8], dtype: Precision, shape: &[usize]) -> Tensor<S> {
    let vals: Vec<S> = match dtype {
        Precision::Float32 => bytes.chunks_exact(4).map(|b| S::of(f32::from_le_bytes(b.try_into().unwrap()) as f64)).collect(),
        Precision::Float64 => bytes.chunks_exact(8).map(|b| S::of(f64::from_le_bytes(b.try_into().unwrap()))).collect(),
    };
    Tensor::new(shape, vals).expect("section sizes checked")
}

/// Reads the header only.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(parse(path, &bytes)?.0)
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Header, &'a [u8])> {
    let err = |msg: String| Error::Checkpoint { path: path.into(), msg };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| err("truncated in section `header`".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| err(format!("section `header` is corrupt: {e}")))?;
    Ok((header, &bytes[16 + len..]))
}

/// Loads and verifies every section before building anything. A fingerprint
/// different from `expected` is refused unless `force`.
pub fn load<S: Real>(path: &Path, expected: Option<&str>, force: bool) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let err = |msg: String| Error::Checkpoint { path: path.into(), msg };
    let (header, blob) = parse(path, &bytes)?;
    if let Some(fp) = expected {
        if fp != header.fingerprint && !force {
            return Err(err(format!(
                "configuration fingerprint {} does not match this run ({}); set paths.allow_fingerprint_mismatch to load anyway",
                header.fingerprint, fp
            )));
        }
    }
    let width = match header.dtype {
        Precision::Float32 => 4,
        Precision::Float64 => 8,
    };
    let mut decoded: Vec<(String, Vec<(String, Tensor<S>)>)> = Vec::new();
    for s in &header.sections {
        let (lo, hi) = (s.offset as usize, (s.offset + s.bytes) as usize);
        let raw = blob.get(lo..hi).ok_or_else(|| err(format!("truncated in section `{}`", s.name)))?;
        if crc32fast::hash(raw) != s.crc32 {
            return Err(err(format!("section `{}` fails its CRC check", s.name)));
        }
        let mut at = 0;
        let mut tensors = Vec::with_capacity(s.tensors.len());
        for t in &s.tensors {
            let n = t.shape.iter().product::<usize>() * width;
            let chunk = raw.get(at..at + n).ok_or_else(|| err(format!("section `{}` is shorter than its tensors", s.name)))?;
            tensors.push((t.name.clone(), decode::<S>(chunk, header.dtype, &t.shape)));
            at += n;
        }
        if at != raw.len() {
            return Err(err(format!("section `{}` has {} trailing bytes", s.name, raw.len() - at)));
        }
        decoded.push((s.name.clone(), tensors));
    }

    let mut model = PixelFlowCast::<S>::new(&header.model, 0)?;
    let mut m = None;
    let mut v = None;
    let mut seen = 0;
    for (section, tensors) in decoded {
        match section.as_str() {
            "optimizer.m" => m = Some(tensors.into_iter().map(|(_, t)| t).collect::<Vec<_>>()),
            "optimizer.v" => v = Some(tensors.into_iter().map(|(_, t)| t).collect::<Vec<_>>()),
            _ => {
                for (name, t) in tensors {
                    let id = model.store.find(&name).ok_or_else(|| err(format!("section `{section}`: unknown tensor {name}")))?;
                    if model.store.value(id).shape() != t.shape() {
                        return Err(err(format!("section `{section}`: {name} has shape {:?}", t.shape())));
                    }
                    model.store.set(id, t);
                    seen += 1;
                }
            }
        }
    }
    if seen != model.store.len() {
        return Err(err(format!("holds {} of the model's {} tensors", seen, model.store.len())));
    }
    let optimizer = match (&header.train, m, v) {
        (Some(state), Some(m), Some(v)) if m.len() == model.store.len() && v.len() == model.store.len() => {
            Some(AdamW { config: state.config.optimizer, step: state.optimizer_step, m, v })
        }
        (None, None, None) => None,
        _ => return Err(err("optimizer sections do not match the training state".into())),
    };
    let rng = match &header.train {
        Some(s) => Some(restore_rng(&s.rng).ok_or_else(|| err("section `header`: malformed RNG state".into()))?),
        None => None,
    };
    Ok(Checkpoint { header, model, optimizer, rng })
}

impl<S: Real> Checkpoint<S> {
    /// Resumes the saved trainer exactly; `None` for weights-only files.
    pub fn into_trainer(self) -> Result<Option<Trainer<S>>> {
        let (Some(state), Some(opt), Some(rng)) = (self.header.train, self.optimizer, self.rng) else {
            return Ok(None);
        };
        let phase = if state.pretrain { Phase::Pretrain } else { Phase::Joint };
        let mut t = Trainer::new(self.model, &state.config, phase, state.schedule_total)?;
        t.optimizer = opt;
        t.step = state.step;
        t.rng = rng;
        Ok(Some(t))
    }
}
