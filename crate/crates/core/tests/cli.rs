use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edge_depth::data::{load_depth_png, PlaneSpec, SceneSpec};
use edge_depth::maps::DepthMap;
use edge_depth::metrics::extract_boundaries;
use edge_depth::viz::{PlotSummary, BOUNDARY_COLOR};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_edge-depth"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn edge-depth")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} should fail");
    assert_eq!(out.status.code(), Some(1));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, frames: usize, size: usize) -> PathBuf {
    let out = dir.join("data");
    ok(&["synth-data", "--frames", &frames.to_string(), "--width", &size.to_string(), "--height", &size.to_string(), "--seed", "4", "--out", s(&out)]);
    out.join("manifest.jsonl")
}

fn count(dir: &Path) -> usize {
    std::fs::read_dir(dir).map(|d| d.count()).unwrap_or(0)
}

#[test]
fn synth_data_writes_the_dataset_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 10, 32);
    synth(b.path(), 10, 32);
    let data = a.path().join("data");
    assert_eq!(count(&data.join("rgb")), 10);
    assert_eq!(count(&data.join("depth")), 10);
    assert!(data.join("manifest.jsonl").is_file());
    for i in 0..10 {
        let f = format!("data/depth/{i:04}.png");
        assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
    }
}

#[test]
fn synth_data_fails_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        planes: vec![PlaneSpec { point: [0.0, 0.0, -3.0], normal: [0.0, 0.0, 1.0], radius: None }],
        ..SceneSpec::corner(16, 12, 3, 0)
    };
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = dir.path().join("never");
    fails(&["synth-data", "--spec", s(&spec_path), "--out", s(&out)]);
    assert!(!out.exists());
}

#[test]
fn param_count_rows_sum_to_total() {
    let text = ok(&["param-count", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let n = |k: &str| v[k].as_u64().unwrap();
    assert_eq!(n("backbone") + n("decoder") + n("posenet") + n("seg_head"), n("total"));

    let wo_high: serde_json::Value =
        serde_json::from_str(&ok(&["param-count", "--json", "--set", "ablation.disable_high_level_sce=true"])).unwrap();
    assert!(wo_high["decoder"].as_u64().unwrap() < n("decoder"));
    assert!(ok(&["param-count"]).contains("total"));
}

#[test]
fn param_count_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"decoder": {}}"#).unwrap();
    fails(&["param-count", "--config", s(&cfg)]);
    fails(&["param-count", "--set", "decoder.no_such_key=1"]);
    fails(&["param-count", "--set", "learning_rate"]);
    fails(&["param-count", "--config", s(&dir.path().join("missing.json"))]);
}

#[test]
fn train_eval_infer_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 6, 32);
    let run_dir = dir.path().join("run");
    ok(&[
        "train", "--data", s(&manifest), "--out", s(&run_dir),
        "--set", "max_steps=2", "--set", "batch_size=2", "--set", "eval_every=1",
    ]);
    for f in ["config.json", "train_log.jsonl", "stage1_last.safetensors", "stage1_best.safetensors"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "view", "geo", "bnd", "sem", "total", "lr"] {
            assert!(r.get(k).is_some(), "log line lacks {k}");
        }
    }
    let ck = run_dir.join("stage1_last.safetensors");

    let keys = |p: &Path| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        let mut k: Vec<String> = v["mean"].as_object().unwrap().keys().cloned().collect();
        k.extend(v["frames"][0].as_object().unwrap().keys().cloned());
        k
    };
    let (e1, e2) = (dir.path().join("eval1"), dir.path().join("eval2"));
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&manifest), "--out", s(&e1)]);
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&manifest), "--out", s(&e2), "--no-median-scaling"]);
    assert_eq!(keys(&e1.join("eval.json")), keys(&e2.join("eval.json")));
    let csv = std::fs::read_to_string(e1.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 1);

    let img = dir.path().join("data/rgb/0002.png");
    let copy = dir.path().join("copy.png");
    std::fs::copy(&img, &copy).unwrap();
    let inf = dir.path().join("infer");
    ok(&[
        "infer", "--checkpoint", s(&ck), "--out", s(&inf), "--ply", "--intrinsics", "28.8,28.8,15.5,15.5",
        s(&img), s(&copy),
    ]);
    let d = load_depth_png(&inf.join("0002_depth.png")).unwrap();
    assert_eq!((d.width, d.height), (32, 32));
    assert_eq!(std::fs::read(inf.join("0002_depth.png")).unwrap(), std::fs::read(inf.join("copy_depth.png")).unwrap());
    let ply = std::fs::read_to_string(inf.join("0002.ply")).unwrap();
    assert!(ply.contains(&format!("element vertex {}\n", d.n_valid())));

    let pl = dir.path().join("plot");
    let gt = dir.path().join("data/depth/0002.png");
    ok(&["plot", "--pred", s(&gt), "--gt", s(&gt), "--out", s(&pl)]);
    let summary: PlotSummary =
        serde_json::from_str(&std::fs::read_to_string(pl.join("0002_plot.json")).unwrap()).unwrap();
    let gt_map = load_depth_png(&gt).unwrap();
    let v = gt_map.masked_values();
    assert_eq!(summary.min_depth, v.iter().copied().reduce(f32::min));
    assert_eq!(summary.max_depth, v.iter().copied().reduce(f32::max));
    let overlay = image::open(pl.join("0002_boundaries.png")).unwrap().to_rgb8();
    let b = extract_boundaries(&gt_map, summary.boundary_threshold);
    for (x, y, p) in overlay.enumerate_pixels() {
        assert_eq!(p.0 == BOUNDARY_COLOR, b.get(x as usize, y as usize), "pixel {x},{y}");
    }
    assert_eq!(summary.boundary_pixels, b.count());

    fails(&["eval", "--checkpoint", s(&dir.path().join("nope.safetensors")), "--data", s(&manifest), "--out", s(&e1)]);
    fails(&["infer", "--checkpoint", s(&ck), "--out", s(&inf), s(&dir.path().join("missing.png"))]);
}

#[test]
fn resuming_a_finished_run_adds_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4, 32);
    let run_dir = dir.path().join("run");
    ok(&["train", "--data", s(&manifest), "--out", s(&run_dir), "--set", "max_steps=1", "--set", "batch_size=2"]);
    let ck = run_dir.join("stage1_last.safetensors");
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(run_dir.join("train_log.jsonl"), resumed.join("train_log.jsonl")).unwrap();
    ok(&["train", "--data", s(&manifest), "--out", s(&resumed), "--resume", s(&ck)]);
    let log = std::fs::read_to_string(resumed.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(resumed.join("stage1_last.safetensors").is_file());
}

#[test]
fn stage2_without_teacher_fails() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 4, 32);
    let err = fails(&["train", "--data", s(&manifest), "--out", s(&dir.path().join("r")), "--set", "stage=2"]);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn plot_of_constant_depth_is_one_color() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("flat.png");
    edge_depth::data::save_depth_png(&p, &DepthMap::constant(12, 9, 2.5)).unwrap();
    ok(&["plot", "--pred", s(&p), "--out", s(dir.path())]);
    let img = image::open(dir.path().join("flat_color.png")).unwrap().to_rgb8();
    let first = *img.get_pixel(0, 0);
    assert!(img.pixels().all(|q| *q == first));
    let other = dir.path().join("other.png");
    edge_depth::data::save_depth_png(&other, &DepthMap::constant(10, 9, 2.5)).unwrap();
    fails(&["plot", "--pred", s(&p), "--gt", s(&other), "--out", s(dir.path())]);
}
