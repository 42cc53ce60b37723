use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::Serialize;

use radcam::dataset::{generate_dataset, Dataset};
use radcam::detection::DetectionSet;
use radcam::evaluation::{aggregate_report, check_rig, evaluate_frames, BoxMode, SensorFailure};
use radcam::fusion::QueryGrid;
use radcam::model::{prepare_input, Modalities};
use radcam::synthetic::{generate_scene, render_camera, render_radar};
use radcam::training::{train_loop, TrainOutputs, TrainSample, Trainer};
use radcam::{Checkpoint32, Model32};

use crate::config::RunConfig;
use crate::Common;

/// Exit code 1 for `Usage`, 2 for `Runtime`.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<radcam::error::Error> for CliError {
    fn from(e: radcam::error::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow!("{msg}"))
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.paths.data_root = d.clone();
    }
    if let Some(o) = &common.out {
        cfg.paths.output = o.clone();
    }
    Ok(cfg)
}

fn validated(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate().map_err(CliError::Usage)
}

fn existing(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    existing(&cfg.paths.data_root, "dataset directory")?;
    Ok(Dataset::open(&cfg.paths.data_root)?)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint32, CliError> {
    existing(path, "checkpoint")?;
    Ok(Checkpoint32::load(path)?)
}

pub fn generate_data(common: &Common, count: Option<usize>, force: bool) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(c) = count {
        cfg.data.count = c;
    }
    validated(&cfg)?;
    let m = generate_dataset(
        &cfg.paths.data_root,
        cfg.data.count,
        cfg.data_seed(),
        &cfg.scene,
        &cfg.rig,
        force,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "dataset": cfg.paths.data_root,
            "scenes": m.count,
            "seed": m.seed,
            "conditions": m.conditions,
        })
    );
    Ok(())
}

pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub queries: Option<usize>,
    pub modalities: Option<String>,
}

pub fn train(common: &Common, o: TrainOverrides, resume: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(n) = o.queries {
        cfg.model.queries = QueryGrid::square(n).map_err(|e| usage(e))?;
    }
    if let Some(m) = &o.modalities {
        cfg.model.modalities = m.parse::<Modalities>().map_err(|e| usage(e))?;
    }
    validated(&cfg)?;
    let data = open_dataset(&cfg)?;
    let cfg = cfg.seeded();

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut t = Trainer::resume(ckpt)?;
            if let Some(e) = o.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => Trainer::new(Model32::new(&cfg.model, data.rig())?, cfg.train.clone())?,
    };
    check_rig(&trainer.model.rig, data.rig())?;
    let records = data.load_all()?;
    let model_cfg = trainer.model.config.clone();
    let samples: Vec<TrainSample<f32>> = records
        .par_iter()
        .map(|r| {
            Ok(TrainSample {
                name: r.name.clone(),
                input: prepare_input(&r.cube, &r.image, &model_cfg)?,
                targets: r.boxes.clone(),
            })
        })
        .collect::<radcam::error::Result<_>>()?;

    let out = TrainOutputs {
        dir: cfg.paths.output.clone(),
    };
    fs::create_dir_all(&out.dir)?;
    let mut saved = cfg.clone();
    saved.model = trainer.model.config.clone();
    saved.train = trainer.config.clone();
    fs::write(out.dir.join("config.toml"), saved.to_toml()?)?;
    let epochs = train_loop(&mut trainer, &samples, Some(&out))?;
    let summary = serde_json::json!({
        "epochs_run": epochs.len(),
        "epoch": trainer.epoch,
        "steps": trainer.step_count(),
        "last": epochs.last(),
        "checkpoint": out.last_checkpoint(),
        "parameters": trainer.model.parameter_count(),
    });
    println!("{summary}");
    Ok(())
}

fn report_stem(failure: SensorFailure) -> String {
    match failure {
        SensorFailure::None => "eval_report".into(),
        f => format!("eval_report_fail_{f}"),
    }
}

pub fn eval(common: &Common, checkpoint: &Path, fail: Option<&str>) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    validated(&cfg)?;
    let failure = match fail {
        Some(f) => f.parse::<SensorFailure>().map_err(|e| usage(e))?,
        None => cfg.eval.fail_modality,
    };
    let ckpt = load_checkpoint(checkpoint)?;
    let data = open_dataset(&cfg)?;
    check_rig(&ckpt.rig, data.rig())?;
    let model = ckpt.model()?;
    let records = data.load_all()?;
    let frames = evaluate_frames(&model, &records, failure)?;
    let report = aggregate_report(&frames, &data.manifest.class_names);
    let stem = report_stem(failure);
    let json_path = cfg.paths.output.join(format!("{stem}.json"));
    write_json(&json_path, &report)?;
    fs::write(cfg.paths.output.join(format!("{stem}.csv")), report.to_csv())?;
    let summary = serde_json::json!({
        "report": json_path,
        "modalities": model.config.modalities.to_string(),
        "fail_modality": failure.to_string(),
        "frames": report.frames,
        "total_gt": report.total_gt,
        "map_3d": BoxModeSummary::of(&report, BoxMode::ThreeD),
        "map_bev": BoxModeSummary::of(&report, BoxMode::Bev),
    });
    println!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct BoxModeSummary {
    #[serde(rename = "0.3")]
    at_03: Option<f64>,
    #[serde(rename = "0.5")]
    at_05: Option<f64>,
    #[serde(rename = "0.7")]
    at_07: Option<f64>,
}

impl BoxModeSummary {
    fn of(r: &radcam::evaluation::EvalReport, mode: BoxMode) -> Self {
        Self {
            at_03: r.total_map(mode, 0.3),
            at_05: r.total_map(mode, 0.5),
            at_07: r.total_map(mode, 0.7),
        }
    }
}

pub fn infer(common: &Common, checkpoint: &Path, min_score: Option<f64>) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(s) = min_score {
        cfg.eval.min_score = s;
    }
    validated(&cfg)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let data = open_dataset(&cfg)?;
    check_rig(&ckpt.rig, data.rig())?;
    let model = ckpt.model()?;
    let records = data.load_all()?;
    let frames = evaluate_frames(&model, &records, cfg.eval.fail_modality)?;
    let sets: Vec<DetectionSet> = frames
        .iter()
        .map(|f| DetectionSet::new(f.frame.clone(), &f.detections, cfg.eval.min_score))
        .collect();
    let path = cfg.paths.output.join("predictions.json");
    write_json(&path, &sets)?;
    let count: usize = sets.iter().map(|s| s.detections.len()).sum();
    println!("{}", serde_json::json!({ "predictions": path, "frames": sets.len(), "detections": count }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchmarkReport {
    runs: usize,
    warmup: usize,
    mean_ms: f64,
    std_ms: f64,
    parameters: usize,
    queries: usize,
    modalities: String,
    frame: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn benchmark(
    common: &Common,
    checkpoint: Option<&Path>,
    runs: Option<usize>,
    warmup: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(r) = runs {
        cfg.benchmark.runs = r;
    }
    if let Some(w) = warmup {
        cfg.benchmark.warmup = w;
    }
    if cfg.benchmark.runs == 0 {
        return Err(usage("runs must be positive"));
    }
    validated(&cfg)?;
    let cfg = cfg.seeded();
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.model()?,
        None => Model32::new(&cfg.model, &cfg.rig)?,
    };
    // first dataset frame when one is present, else a freshly rendered scene
    let (frame, cube, image) = match Dataset::open(&cfg.paths.data_root) {
        Ok(d) if !d.is_empty() && d.rig() == &model.rig => {
            let r = d.load(0)?;
            (r.name, r.cube, r.image)
        }
        _ => {
            let scene = generate_scene(cfg.data_seed(), &cfg.scene, &model.rig)?;
            (
                "synthetic".to_string(),
                render_radar(&scene, &model.rig),
                render_camera(&scene, &model.rig, &cfg.scene.classes),
            )
        }
    };
    let input = prepare_input(&cube, &image, &model.config)?;
    for _ in 0..cfg.benchmark.warmup {
        model.infer(&input)?;
    }
    let mut times = Vec::with_capacity(cfg.benchmark.runs);
    for _ in 0..cfg.benchmark.runs {
        let t = Instant::now();
        std::hint::black_box(model.infer(&input)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (mean_ms, std_ms) = mean_std(&times);
    let report = BenchmarkReport {
        runs: cfg.benchmark.runs,
        warmup: cfg.benchmark.warmup,
        mean_ms,
        std_ms,
        parameters: model.parameter_count(),
        queries: model.config.queries.count(),
        modalities: model.config.modalities.to_string(),
        frame,
    };
    write_json(&cfg.paths.output.join("benchmark.json"), &report)?;
    println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
    Ok(())
}
