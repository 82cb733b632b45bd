use std::fs;

use pixelflow::checkpoint::{self, load, read_header, save_model, save_trainer};
use pixelflow::config::fingerprint;
use pixelflow_core::data::{generate_synthetic_event, slide_windows, EventWindow, SyntheticSceneSpec};
use pixelflow_core::pipeline::{ModelConfig, Phase, PixelFlowCast, Precision, TrainConfig, Trainer};
use pixelflow_core::pmf::SamplerConfig;
use pixelflow_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn windows() -> Vec<EventWindow> {
    let spec = SyntheticSceneSpec::sample(3, 8, &Default::default());
    let seq = generate_synthetic_event(&spec, 9, 8, 8).unwrap();
    slide_windows(&seq, 2, 4, 1).unwrap()
}

fn trained<S: Real>(precision: Precision) -> Trainer<S> {
    let cfg = TrainConfig { precision, ..Default::default() };
    let mut tr = Trainer::new(PixelFlowCast::<S>::new(&ModelConfig::tiny(2, 4, 8), 1).unwrap(), &cfg, Phase::Joint, 10).unwrap();
    let w = windows();
    for i in 0..3 {
        tr.train_step(&[&w[i % w.len()]]).unwrap();
    }
    tr
}

fn forecast_bits<S: Real>(m: &PixelFlowCast<S>) -> Vec<u32> {
    let past = &windows()[0].past;
    let (c, r) = m.forecast_frames(past, &SamplerConfig { steps: 2, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    c.data().iter().chain(r.data()).map(|v| v.to_bits()).collect()
}

#[test]
fn round_trip_is_bit_exact_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.pfc");
    let t32 = trained::<f32>(Precision::Float32);
    save_trainer(&p, &t32).unwrap();
    let back = load::<f32>(&p, None, false).unwrap();
    assert_eq!(back.model.store.iter().map(|x| x.2.clone()).collect::<Vec<_>>(), t32.model.store.iter().map(|x| x.2.clone()).collect::<Vec<_>>());
    assert_eq!(forecast_bits(&back.model), forecast_bits(&t32.model));

    let t64 = trained::<f64>(Precision::Float64);
    save_trainer(&p, &t64).unwrap();
    let back = load::<f64>(&p, None, false).unwrap();
    assert!(t64.model.store.iter().zip(back.model.store.iter()).all(|(a, b)| a.2 == b.2));
    assert_eq!(forecast_bits(&back.model), forecast_bits(&t64.model));
}

#[test]
fn resumed_trainer_continues_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.pfc");
    let mut a = trained::<f64>(Precision::Float64);
    save_trainer(&p, &a).unwrap();
    let mut b = load::<f64>(&p, None, false).unwrap().into_trainer().unwrap().expect("trainer state");
    let w = windows();
    for x in &w[..3] {
        assert_eq!(a.train_step(&[x]).unwrap(), b.train_step(&[x]).unwrap());
    }
}

#[test]
fn weights_only_files_have_no_trainer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.pfc");
    let m = PixelFlowCast::<f32>::new(&ModelConfig::tiny(2, 4, 8), 0).unwrap();
    save_model(&p, &m).unwrap();
    let h = read_header(&p).unwrap();
    assert!(h.train.is_none());
    assert_eq!(h.sections.len(), 3);
    assert!(load::<f32>(&p, None, false).unwrap().into_trainer().unwrap().is_none());
}

#[test]
fn fingerprint_mismatch_is_refused_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.pfc");
    let cfg = ModelConfig::tiny(2, 4, 8);
    save_model(&p, &PixelFlowCast::<f32>::new(&cfg, 0).unwrap()).unwrap();
    let same = fingerprint(&cfg, Precision::Float32);
    assert!(load::<f32>(&p, Some(&same), false).is_ok());
    let mut other = cfg.clone();
    other.xprednet.time_embed_dim = 16;
    let err = load::<f32>(&p, Some(&fingerprint(&other, Precision::Float32)), false).err().expect("refused");
    assert!(err.to_string().contains("fingerprint"), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(load::<f32>(&p, Some(&fingerprint(&other, Precision::Float32)), true).is_ok());
}

#[test]
fn truncation_and_corruption_name_the_section() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.pfc");
    save_trainer(&p, &trained::<f32>(Precision::Float32)).unwrap();
    let bytes = fs::read(&p).unwrap();

    fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    let err = load::<f32>(&p, None, false).err().expect("truncated").to_string();
    assert!(err.contains("truncated in section `optimizer.v`"), "{err}");

    fs::write(&p, &bytes[..40]).unwrap();
    let err = load::<f32>(&p, None, false).err().expect("truncated").to_string();
    assert!(err.contains("section `header`"), "{err}");

    let h = read_header(&{
        fs::write(&p, &bytes).unwrap();
        p.clone()
    })
    .unwrap();
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let xpred = h.sections.iter().find(|s| s.name == "weights.xprednet").unwrap();
    let mut bad = bytes.clone();
    bad[16 + json_len + xpred.offset as usize + 5] ^= 0x40;
    fs::write(&p, &bad).unwrap();
    let err = load::<f32>(&p, None, false).err().expect("corrupt").to_string();
    assert!(err.contains("`weights.xprednet` fails its CRC"), "{err}");

    fs::write(&p, b"not a checkpoint at all").unwrap();
    assert!(load::<f32>(&p, None, false).err().unwrap().to_string().contains("magic"));
    assert_eq!(&checkpoint::MAGIC[..], b"PXFLCKP1");
}
