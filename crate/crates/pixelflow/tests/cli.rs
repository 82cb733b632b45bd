use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pixelflow::dataset::{read_split, write_split};
use pixelflow::report::Table;
use pixelflow::run::Manifest;
use pixelflow_core::data::{DatasetManifest, FrameSequence, Source, Split};
use pixelflow_core::metrics::MetricReport;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixelflowcast")).args(args).env_remove("PIXELFLOW_DEVICE").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn set(key: &str, path: &Path) -> String {
    format!("{key}={}", p(path))
}

/// gen-data, train, forecast and evaluate into `root/<tag>-*` with the tiny
/// config in float64.
fn pipeline(root: &Path, tag: &str) -> PathBuf {
    let cfg = tiny_config();
    let c = p(&cfg);
    let (data, run, fc, ev) = (root.join(format!("{tag}-data")), root.join(format!("{tag}-run")), root.join(format!("{tag}-fc")), root.join(format!("{tag}-ev")));
    let f64 = "train.precision=float64";
    ok(&["gen-data", "--config", c, "--out", p(&data), "--seed", "3"]);
    ok(&["train", "--config", c, "--set", f64, "--set", &set("paths.data", &data), "--out", p(&run), "--seed", "5"]);
    let ckpt = run.join("checkpoint.pfc");
    ok(&["forecast", "--config", c, "--set", f64, "--set", &set("paths.data", &data), "--set", &set("paths.checkpoint", &ckpt), "--out", p(&fc), "--seed", "5"]);
    ok(&["evaluate", "--config", c, "--set", &set("paths.forecast", &fc), "--out", p(&ev)]);
    root.to_path_buf()
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn float64_runs_reproduce_every_csv() {
    let dir = tempfile::tempdir().unwrap();
    let root = pipeline(dir.path(), "a");
    pipeline(dir.path(), "b");
    for f in ["a-run/loss.csv", "a-ev/metrics.csv", "a-ev/coarse_metrics.csv", "a-ev/report.json", "a-fc/refined/event_0000.f32", "a-run/checkpoint.pfc"] {
        assert_eq!(read(root.join(f)), read(root.join(f.replacen("a-", "b-", 1))), "{f}");
    }
    let loss = Table::read(&root.join("a-run/loss.csv")).unwrap();
    assert_eq!(loss.header, ["step", "phase", "k", "coarse", "pmf", "total", "lr", "grad_norm"]);
    assert_eq!(loss.rows.len(), 10);

    let m: Manifest = serde_json::from_slice(&read(root.join("a-run/manifest.json"))).unwrap();
    assert_eq!((m.data_seed, m.train_seed), (0, 5));
    let m: Manifest = serde_json::from_slice(&read(root.join("a-data/manifest.json"))).unwrap();
    assert_eq!(m.data_seed, 3);
}

#[test]
fn rerun_from_the_resolved_config_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = pipeline(dir.path(), "m");
    for stage in ["m-run", "m-fc", "m-ev"] {
        let again = root.join(format!("{stage}-again"));
        let m: Manifest = serde_json::from_slice(&read(root.join(stage).join("manifest.json"))).unwrap();
        let cmd = serde_json::to_value(m.command).unwrap();
        ok(&[cmd.as_str().unwrap(), "--config", p(&root.join(stage).join("config.resolved.toml")), "--out", p(&again)]);
        for a in &m.artifacts {
            if a.ends_with('/') {
                let sub = a.trim_end_matches('/');
                assert_eq!(read(root.join(stage).join(sub).join("event_0000.f32")), read(again.join(sub).join("event_0000.f32")), "{stage}/{a}");
            } else {
                assert_eq!(read(root.join(stage).join(a)), read(again.join(a)), "{stage}/{a}");
            }
        }
    }
}

/// Ramps from 0 to 1 across each frame, so every threshold splits every
/// frame into both classes.
fn ramp_sequence(t: usize, res: usize) -> FrameSequence {
    let n = res * res;
    let data = (0..t * n).map(|i| (i % n) as f32 / (n - 1) as f32).collect();
    FrameSequence::new(t, res, res, 1, data).unwrap()
}

#[test]
fn perfect_forecast_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let fc = dir.path().join("fc");
    let seqs: Vec<(FrameSequence, u64)> = (0..2).map(|_| (ramp_sequence(8, 16), 0)).collect();
    let manifest = DatasetManifest::new(Split::Test, Source::Synthetic, 2);
    for sub in ["truth", "coarse", "refined"] {
        write_split(&fc.join(sub), &manifest, &seqs).unwrap();
    }
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--config", p(&tiny_config()), "--set", &set("paths.forecast", &fc), "--out", p(&ev)]);
    let t = Table::read(&ev.join("metrics.csv")).unwrap();
    assert_eq!(t.rows.len(), 2 * 8 * 6);
    assert_eq!(t.header, ["event", "frame", "threshold", "csi", "hss", "pooled_csi_4", "pooled_csi_16"]);
    for r in &t.rows {
        assert!(r[3..].iter().all(|&v| v == 1.0), "{r:?}");
    }
    let report: MetricReport = serde_json::from_slice(&read(ev.join("report.json"))).unwrap();
    assert_eq!((report.mean_csi, report.mean_hss, report.ssim), (1.0, 1.0, 1.0));
    assert!(report.per_lead_time.csi.iter().chain(&report.per_lead_time.hss).all(|&v| v == 1.0));
    assert_eq!(report.per_lead_time.csi.len(), 8);
}

#[test]
fn ablations_and_bench_emit_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let c = p(&cfg);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--config", c, "--out", p(&data)]);
    ok(&["train", "--config", c, "--set", &set("paths.data", &data), "--out", p(&run)]);
    let ck = set("paths.checkpoint", &run.join("checkpoint.pfc"));
    let d = set("paths.data", &data);

    let out = dir.path().join("steps");
    ok(&["ablate-steps", "--config", c, "--set", &d, "--set", &ck, "--out", p(&out)]);
    let t = Table::read(&out.join("ablate_steps.csv")).unwrap();
    assert_eq!(t.header[0], "steps");
    assert_eq!(t.rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [1.0, 5.0, 10.0, 15.0, 20.0]);

    let out = dir.path().join("extraction");
    ok(&["ablate-extraction", "--config", c, "--set", &d, "--set", &ck, "--out", p(&out)]);
    let text = String::from_utf8(read(out.join("ablate_extraction.csv"))).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["noise_free", "accumulation"]);

    let out = dir.path().join("bench");
    ok(&["bench", "--config", c, "--set", &d, "--set", &ck, "--set", "sampler.steps=2", "--out", p(&out)]);
    let b: pixelflow::bench::BenchResult = serde_json::from_slice(&read(out.join("latency.json"))).unwrap();
    assert_eq!((b.stats.samples, b.calls_per_window.clone()), (2, vec![2, 2]));
}

#[test]
fn plots_have_exact_csv_twins() {
    let dir = tempfile::tempdir().unwrap();
    let root = pipeline(dir.path(), "p");
    let out = dir.path().join("plots");
    let reports = format!("paths.reports=[\"{}\", \"{}\"]", p(&root.join("p-ev/report.json")), p(&root.join("p-ev/coarse_report.json")));
    let losses = format!("paths.losses=[\"{}\"]", p(&root.join("p-run/loss.csv")));
    ok(&["plot", "--set", &reports, "--set", "paths.labels=[\"refined\", \"coarse\"]", "--set", &losses, "--out", p(&out)]);
    for f in ["lead_time_csi.svg", "lead_time_hss.svg", "loss.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csi = Table::read(&out.join("lead_time_csi.csv")).unwrap();
    assert_eq!(csi.header, ["frame", "refined_csi", "coarse_csi"]);
    assert_eq!(csi.rows.len(), 8);
    let refined: MetricReport = serde_json::from_slice(&read(root.join("p-ev/report.json"))).unwrap();
    let coarse: MetricReport = serde_json::from_slice(&read(root.join("p-ev/coarse_report.json"))).unwrap();
    for (i, r) in csi.rows.iter().enumerate() {
        assert_eq!(r[1].to_bits(), refined.per_lead_time.csi[i].to_bits());
        assert_eq!(r[2].to_bits(), coarse.per_lead_time.csi[i].to_bits());
    }
    let hss = Table::read(&out.join("lead_time_hss.csv")).unwrap();
    assert_eq!(hss.rows[7][1].to_bits(), refined.per_lead_time.hss[7].to_bits());

    // a loss file without the plotted column
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "step,coarse\n0,1.0\n").unwrap();
    let out = cli(&["plot", "--set", &format!("paths.losses=[\"{}\"]", p(&bad)), "--out", p(&dir.path().join("bad"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing columns total"));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"per_lead_time\": {}}").unwrap();
    let out = cli(&["plot", "--set", &format!("paths.reports=[\"{}\"]", p(&bad)), "--out", p(&dir.path().join("bad"))]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("per_lead_time.csi") && err.contains("per_lead_time.hss"), "{err}");
}

#[test]
fn output_directories_are_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let c = tiny_config();
    ok(&["gen-data", "--config", p(&c), "--out", p(&out)]);
    let again = cli(&["gen-data", "--config", p(&c), "--out", p(&out)]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    fs::write(out.join("stray.txt"), "x").unwrap();
    ok(&["gen-data", "--config", p(&c), "--out", p(&out), "--force"]);
    assert!(!out.join("stray.txt").exists());
    let (_, events) = read_split(&out.join("test")).unwrap();
    assert_eq!(events.len(), 1);

    // a failing command leaves neither the output nor a staging directory
    let missing = dir.path().join("nowhere");
    let failed = dir.path().join("failed");
    let out = cli(&["train", "--config", p(&c), "--set", &set("paths.data", &missing), "--out", p(&failed)]);
    assert_eq!(code(&out), 3);
    let left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("d")], "{left:?}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path()).to_string() + "/o";
    assert_eq!(code(&cli(&["gen-data", "--set", "train.no_such=1", "--out", &out])), 2);
    assert_eq!(code(&cli(&["gen-data", "--set", "train.epochs=many", "--out", &out])), 2);
    assert_eq!(code(&cli(&["train", "--out", &out])), 2);
    assert_eq!(code(&cli(&["gen-data", "--config", "/no/such/file.toml", "--out", &out])), 3);
    let gpu = Command::new(env!("CARGO_BIN_EXE_pixelflowcast")).args(["gen-data", "--out", &out]).env("PIXELFLOW_DEVICE", "cuda:0").output().unwrap();
    assert_eq!(code(&gpu), 2);
    let cpu = Command::new(env!("CARGO_BIN_EXE_pixelflowcast"))
        .args(["gen-data", "--config", p(&tiny_config()), "--out", &out])
        .env("PIXELFLOW_DEVICE", "cpu")
        .output()
        .unwrap();
    assert!(cpu.status.success());
}
