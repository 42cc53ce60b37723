use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
cycles = 1

[model.queries]
range_bins = 4
azimuth_bins = 4

[train]
epochs = 2
batch_size = 2
"#;

fn radcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radcam"))
        .args(args)
        .env_remove("RADCAM_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace(config: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let path = root.join("run.toml");
    fs::write(&path, config).unwrap();
    Workspace {
        _dir: dir,
        root,
        config: path,
    }
}

fn generate(ws: &Workspace, name: &str, count: usize) -> PathBuf {
    let data = ws.root.join(name);
    ok(&radcam(&[
        "generate-data",
        "--config",
        s(&ws.config),
        "--data",
        s(&data),
        "--count",
        &count.to_string(),
    ]));
    data
}

fn train(ws: &Workspace, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = ws.root.join(out);
    let mut args = vec!["train", "--config", s(&ws.config), "--data", s(data), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&radcam(&args));
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_count_zero_writes_manifest_only() {
    let ws = workspace("");
    let data = generate(&ws, "empty", 0);
    let f = files(&data);
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].0, "manifest.json");
}

#[test]
fn generate_is_deterministic_and_guards_existing_data() {
    let ws = workspace("seed = 5\n");
    let a = generate(&ws, "a", 3);
    let b = generate(&ws, "b", 3);
    assert_eq!(files(&a), files(&b));

    let again = radcam(&["generate-data", "--config", s(&ws.config), "--data", s(&a), "--count", "2"]);
    assert_eq!(again.status.code(), Some(2));
    let forced = radcam(&["generate-data", "--config", s(&ws.config), "--data", s(&a), "--count", "2", "--force"]);
    ok(&forced);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 2);
}

#[test]
fn condition_mix_is_realised() {
    let ws = workspace("[scene]\ncondition_weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]\n");
    let data = generate(&ws, "mix", 10);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    let normal = manifest["conditions"]["normal"].as_u64().unwrap_or(0) as i64;
    let snow = manifest["conditions"]["heavy_snow"].as_u64().unwrap_or(0) as i64;
    assert_eq!(normal + snow, 10);
    assert!((normal - 5).abs() <= 1 && (snow - 5).abs() <= 1);
}

#[test]
fn data_root_from_environment() {
    let ws = workspace("");
    let data = ws.root.join("env_data");
    let out = Command::new(env!("CARGO_BIN_EXE_radcam"))
        .args(["generate-data", "--count", "1"])
        .env("RADCAM_DATA_ROOT", &data)
        .output()
        .unwrap();
    ok(&out);
    assert!(data.join("manifest.json").exists());
}

#[test]
fn train_logs_one_record_per_epoch_and_resumes_exactly() {
    let ws = workspace(TINY);
    let data = generate(&ws, "data", 4);
    let full = train(&ws, &data, "full", &[]);
    let metrics = fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let half = train(&ws, &data, "half", &["--epochs", "1"]);
    let resumed = ws.root.join("half");
    ok(&radcam(&[
        "train",
        "--config",
        s(&ws.config),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&half.join("last.ckpt")),
        "--epochs",
        "2",
    ]));
    let a = fs::read_to_string(full.join("steps.jsonl")).unwrap();
    let b = fs::read_to_string(resumed.join("steps.jsonl")).unwrap();
    assert_eq!(a, b, "resumed step log differs from the uninterrupted run");
    assert_eq!(fs::read(full.join("last.ckpt")).unwrap(), fs::read(resumed.join("last.ckpt")).unwrap());
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let ws = workspace(TINY);
    let data = generate(&ws, "data", 2);
    let bad = ws.root.join("broken.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = radcam(&[
        "train",
        "--config",
        s(&ws.config),
        "--data",
        s(&data),
        "--out",
        s(&ws.root.join("r")),
        "--resume",
        s(&bad),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("broken.ckpt") && err.contains("version 1"), "{err}");
}

#[test]
fn eval_infer_and_failure_modes() {
    let ws = workspace(TINY);
    let data = generate(&ws, "data", 3);
    let run = train(&ws, &data, "run", &["--epochs", "1"]);
    let ckpt = run.join("last.ckpt");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--config", s(&ws.config), "--data", s(&data), "--out", s(&run), "--checkpoint", s(&ckpt)];
        args.extend_from_slice(extra);
        radcam(&args)
    };
    let first = ok(&eval(&[]));
    let report = fs::read(run.join("eval_report.json")).unwrap();
    assert!(run.join("eval_report.csv").exists());
    let second = ok(&eval(&[]));
    assert_eq!(first, second);
    assert_eq!(report, fs::read(run.join("eval_report.json")).unwrap());

    for m in ["camera", "radar"] {
        ok(&eval(&["--fail-modality", m]));
        assert!(run.join(format!("eval_report_fail_{m}.json")).exists());
    }
    assert_eq!(eval(&["--fail-modality", "lidar"]).status.code(), Some(1));

    ok(&radcam(&[
        "infer",
        "--config",
        s(&ws.config),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--checkpoint",
        s(&ckpt),
        "--min-score",
        "0",
    ]));
    let preds: serde_json::Value = serde_json::from_slice(&fs::read(run.join("predictions.json")).unwrap()).unwrap();
    let frames = preds.as_array().unwrap();
    assert_eq!(frames.len(), 3);
    assert_eq!(frames[0]["detections"].as_array().unwrap().len(), 16);
    for key in ["center", "size", "heading", "class", "score"] {
        assert!(frames[0]["detections"][0].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn rig_mismatch_is_rejected() {
    let ws = workspace(TINY);
    let data = generate(&ws, "data", 2);
    let run = train(&ws, &data, "run", &["--epochs", "1"]);
    let other_cfg = ws.root.join("other.toml");
    fs::write(&other_cfg, format!("{TINY}\n[rig.radar]\nrange_max = 60.0\n")).unwrap();
    let other = ws.root.join("other");
    ok(&radcam(&["generate-data", "--config", s(&other_cfg), "--data", s(&other), "--count", "1"]));
    let out = radcam(&[
        "eval",
        "--config",
        s(&ws.config),
        "--data",
        s(&other),
        "--out",
        s(&run),
        "--checkpoint",
        s(&run.join("last.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rig"));
}

#[test]
fn modality_subsets_train_and_evaluate() {
    let ws = workspace(TINY);
    let data = generate(&ws, "data", 2);
    for m in ["C", "R_AE", "R_RA", "R", "C+R_AE", "C+R_RA", "C+R"] {
        let dir = format!("run_{}", m.replace('+', "_"));
        let run = train(&ws, &data, &dir, &["--epochs", "1", "--modalities", m]);
        let out = ok(&radcam(&[
            "eval",
            "--config",
            s(&ws.config),
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--checkpoint",
            s(&run.join("last.ckpt")),
        ]));
        let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(v["modalities"], m);
    }
    let bad = radcam(&["train", "--config", s(&ws.config), "--data", s(&data), "--modalities", "L"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn benchmark_reports_timing_and_parameters() {
    let ws = workspace(TINY);
    let out_dir = ws.root.join("bench");
    let run = |cfg: &Path, runs: &str| -> serde_json::Value {
        let out = ok(&radcam(&["benchmark", "--config", s(cfg), "--out", s(&out_dir), "--runs", runs, "--warmup", "0"]));
        serde_json::from_str(out.trim()).unwrap()
    };
    let one = run(&ws.config, "1");
    assert_eq!(one["std_ms"], 0.0);
    let many = run(&ws.config, "3");
    assert!(many["mean_ms"].as_f64().unwrap() > 0.0);
    assert!(many["std_ms"].as_f64().unwrap() >= 0.0);
    let small = many["parameters"].as_u64().unwrap();

    let big_cfg = ws.root.join("big.toml");
    fs::write(
        &big_cfg,
        format!("{TINY}\n[model.camera_encoder]\nstem_channels = 16\nstage_channels = [32, 48, 64]\nblocks = [2, 2, 2]\n"),
    )
    .unwrap();
    let big = run(&big_cfg, "1");
    assert!(big["parameters"].as_u64().unwrap() > small);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(radcam(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(radcam(&["eval"]).status.code(), Some(1));
    let ws = workspace("[train]\nbatch_size = 0\n");
    let out = radcam(&["train", "--config", s(&ws.config), "--data", s(&ws.root)]);
    assert_eq!(out.status.code(), Some(1));
    let missing = radcam(&["train", "--data", "/definitely/not/here"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(radcam(&["--help"]).status.code(), Some(0));
}
