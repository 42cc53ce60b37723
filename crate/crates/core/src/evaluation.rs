//! Detection metrics: greedy score-ordered matching, 40-point interpolated
//! AP, sliced reports and sensor-failure simulation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraFrame;
use crate::dataset::SceneRecord;
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::iou::{iou_3d, iou_bev};
use crate::model::{prepare_input, Model};
use crate::radar::RadarCube;
use crate::scalar::Scalar;
use crate::synthetic::{Condition, Daytime, SensorRig};

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const RECALL_POINTS: usize = 40;
/// Range slices in meters; the last bin is open above.
pub const RANGE_BINS: [(f64, f64); 4] = [(0.0, 10.0), (10.0, 30.0), (30.0, 50.0), (50.0, 72.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoxMode {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "bev")]
    Bev,
}

impl BoxMode {
    pub const ALL: [BoxMode; 2] = [BoxMode::ThreeD, BoxMode::Bev];

    pub fn name(self) -> &'static str {
        match self {
            BoxMode::ThreeD => "3d",
            BoxMode::Bev => "bev",
        }
    }

    pub fn iou(self, a: &Box3D<f64>, b: &Box3D<f64>) -> f64 {
        match self {
            BoxMode::ThreeD => iou_3d(a, b),
            BoxMode::Bev => iou_bev(a, b),
        }
    }
}

/// Detections and ground truth of one frame, already restricted to one class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramePair {
    pub detections: Vec<Box3D<f64>>,
    pub ground_truth: Vec<Box3D<f64>>,
}

/// Precision at each recall level `k / 40`, taking the best precision at
/// any recall at or above it. `None` when there is no ground truth.
pub fn average_precision(frames: &[FramePair], iou_threshold: f64, mode: BoxMode) -> Option<f64> {
    let num_gt: usize = frames.iter().map(|f| f.ground_truth.len()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| (0..fr.detections.len()).map(move |d| (f, d)))
        .collect();
    // stable sort keeps frame order among ties
    order.sort_by(|a, b| {
        let sa = frames[a.0].detections[a.1].score;
        let sb = frames[b.0].detections[b.1].score;
        sb.total_cmp(&sa)
    });
    let mut taken: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.ground_truth.len()]).collect();
    let mut curve = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (i, &(f, d)) in order.iter().enumerate() {
        let det = &frames[f].detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frames[f].ground_truth.iter().enumerate() {
            if taken[f][g] {
                continue;
            }
            let iou = mode.iou(det, gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[f][g] = true;
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // running maximum of precision from the high-recall end
    let mut envelope = vec![0.0; curve.len()];
    let mut best = 0.0f64;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].1);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    for k in 1..=RECALL_POINTS {
        let r = k as f64 / RECALL_POINTS as f64;
        let idx = curve.partition_point(|&(rec, _)| rec < r - 1e-12);
        if idx < curve.len() {
            sum += envelope[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Per-class APs averaged with ground-truth counts as weights. Classes with
/// no ground truth are skipped; `None` when no class has any.
pub fn weighted_map(per_class: &[(f64, usize)]) -> Option<f64> {
    let total: usize = per_class.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return None;
    }
    Some(per_class.iter().map(|&(ap, n)| ap * n as f64).sum::<f64>() / total as f64)
}

/// Model output and labels of one evaluated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: String,
    pub condition: Condition,
    pub daytime: Daytime,
    pub detections: Vec<Box3D<f64>>,
    pub ground_truth: Vec<Box3D<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    All,
    Condition,
    Daytime,
    Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub num_gt: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetric {
    pub mode: BoxMode,
    pub threshold: f64,
    /// Ground-truth-weighted mean over `per_class`.
    pub map: f64,
    pub per_class: Vec<ClassAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub kind: SliceKind,
    pub name: String,
    pub num_gt: usize,
    pub metrics: Vec<SliceMetric>,
}

/// JSON layout:
///
/// ```text
/// { version, frames, total_gt, class_names,
///   slices: [ { kind: all|condition|daytime|range, name, num_gt,
///               metrics: [ { mode: 3d|bev, threshold, map,
///                            per_class: [ { class, num_gt, ap } ] } ] } ] }
/// ```
///
/// Slices and classes without ground truth are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub frames: usize,
    pub total_gt: usize,
    pub class_names: Vec<String>,
    pub slices: Vec<SliceReport>,
}

pub fn range_bin_name(bin: (f64, f64)) -> String {
    format!("{}-{}", bin.0, bin.1)
}

fn range_bin(range: f64) -> usize {
    RANGE_BINS
        .iter()
        .rposition(|&(lo, _)| range >= lo)
        .unwrap_or(0)
}

fn slice_metrics(frames: &[&FrameResult], class_names: &[String], keep: impl Fn(&Box3D<f64>) -> bool) -> Vec<SliceMetric> {
    let mut out = Vec::new();
    let per_class_frames: Vec<(usize, Vec<FramePair>)> = (0..class_names.len())
        .map(|c| {
            let pairs: Vec<FramePair> = frames
                .iter()
                .map(|f| FramePair {
                    detections: f.detections.iter().filter(|b| b.class_id == c && keep(b)).copied().collect(),
                    ground_truth: f.ground_truth.iter().filter(|b| b.class_id == c && keep(b)).copied().collect(),
                })
                .collect();
            let n = pairs.iter().map(|p| p.ground_truth.len()).sum();
            (n, pairs)
        })
        .collect();
    for mode in BoxMode::ALL {
        for thr in IOU_THRESHOLDS {
            let per_class: Vec<ClassAp> = per_class_frames
                .iter()
                .enumerate()
                .filter_map(|(c, (n, pairs))| {
                    average_precision(pairs, thr, mode).map(|ap| ClassAp {
                        class: class_names[c].clone(),
                        num_gt: *n,
                        ap,
                    })
                })
                .collect();
            let weights: Vec<(f64, usize)> = per_class.iter().map(|c| (c.ap, c.num_gt)).collect();
            if let Some(map) = weighted_map(&weights) {
                out.push(SliceMetric {
                    mode,
                    threshold: thr,
                    map,
                    per_class,
                });
            }
        }
    }
    out
}

/// Metrics over all frames plus condition, daytime and range slices.
pub fn aggregate_report(frames: &[FrameResult], class_names: &[String]) -> EvalReport {
    let all: Vec<&FrameResult> = frames.iter().collect();
    let count = |fs: &[&FrameResult], keep: &dyn Fn(&Box3D<f64>) -> bool| -> usize {
        fs.iter().map(|f| f.ground_truth.iter().filter(|b| keep(b)).count()).sum()
    };
    let mut jobs: Vec<(SliceKind, String, Vec<&FrameResult>, Option<usize>)> = Vec::new();
    jobs.push((SliceKind::All, "total".into(), all.clone(), None));
    for c in Condition::ALL {
        let fs: Vec<_> = all.iter().copied().filter(|f| f.condition == c).collect();
        jobs.push((SliceKind::Condition, c.name().into(), fs, None));
    }
    for d in Daytime::ALL {
        let fs: Vec<_> = all.iter().copied().filter(|f| f.daytime == d).collect();
        jobs.push((SliceKind::Daytime, d.name().into(), fs, None));
    }
    for (i, &bin) in RANGE_BINS.iter().enumerate() {
        jobs.push((SliceKind::Range, range_bin_name(bin), all.clone(), Some(i)));
    }
    let slices = jobs
        .par_iter()
        .filter_map(|(kind, name, fs, bin)| {
            let keep = |b: &Box3D<f64>| bin.is_none_or(|i| range_bin(b.bev_range()) == i);
            let num_gt = count(fs, &keep);
            if num_gt == 0 {
                return None;
            }
            Some(SliceReport {
                kind: *kind,
                name: name.clone(),
                num_gt,
                metrics: slice_metrics(fs, class_names, keep),
            })
        })
        .collect();
    EvalReport {
        version: 1,
        frames: frames.len(),
        total_gt: count(&all, &|_| true),
        class_names: class_names.to_vec(),
        slices,
    }
}

impl EvalReport {
    pub fn slice(&self, kind: SliceKind, name: &str) -> Option<&SliceReport> {
        self.slices.iter().find(|s| s.kind == kind && s.name == name)
    }

    pub fn map(&self, kind: SliceKind, name: &str, mode: BoxMode, threshold: f64) -> Option<f64> {
        self.slice(kind, name)?
            .metrics
            .iter()
            .find(|m| m.mode == mode && (m.threshold - threshold).abs() < 1e-9)
            .map(|m| m.map)
    }

    /// Headline number over all frames.
    pub fn total_map(&self, mode: BoxMode, threshold: f64) -> Option<f64> {
        self.map(SliceKind::All, "total", mode, threshold)
    }

    /// One row per (mode, threshold); condition columns, then daytime, range
    /// and total. Absent slices leave an empty cell.
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<(SliceKind, String)> = Condition::ALL
            .iter()
            .map(|c| (SliceKind::Condition, c.name().to_string()))
            .collect();
        cols.extend(Daytime::ALL.iter().map(|d| (SliceKind::Daytime, d.name().to_string())));
        cols.extend(RANGE_BINS.iter().map(|&b| (SliceKind::Range, range_bin_name(b))));
        cols.push((SliceKind::All, "total".into()));
        let mut out = String::from("metric");
        for (_, name) in &cols {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for mode in BoxMode::ALL {
            for thr in IOU_THRESHOLDS {
                out.push_str(&format!("{}_map@{thr}", mode.name()));
                for (kind, name) in &cols {
                    out.push(',');
                    if let Some(v) = self.map(*kind, name, mode, thr) {
                        out.push_str(&format!("{v:.4}"));
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Which input to blank out at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorFailure {
    #[default]
    None,
    Camera,
    Radar,
}

impl fmt::Display for SensorFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensorFailure::None => "none",
            SensorFailure::Camera => "camera",
            SensorFailure::Radar => "radar",
        })
    }
}

impl FromStr for SensorFailure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SensorFailure::None),
            "camera" => Ok(SensorFailure::Camera),
            "radar" => Ok(SensorFailure::Radar),
            other => Err(Error::Invalid(format!("unknown modality '{other}' (camera, radar or none)"))),
        }
    }
}

/// Replace the failed sensor's raw data with zeros.
pub fn simulate_sensor_failure<T: Scalar>(
    cube: &RadarCube<T>,
    image: &CameraFrame<T>,
    failed: SensorFailure,
) -> (RadarCube<T>, CameraFrame<T>) {
    match failed {
        SensorFailure::None => (cube.clone(), image.clone()),
        SensorFailure::Camera => (cube.clone(), image.zeroed()),
        SensorFailure::Radar => (cube.zeroed(), image.clone()),
    }
}

/// Checkpoint and dataset must come from the same sensor setup.
pub fn check_rig(model: &SensorRig, data: &SensorRig) -> Result<()> {
    if model != data {
        return Err(Error::Invalid(
            "sensor rig of the checkpoint differs from the dataset rig".into(),
        ));
    }
    Ok(())
}

/// Run the model over `records`, keeping every query's box.
pub fn evaluate_frames<T: Scalar>(
    model: &Model<T>,
    records: &[SceneRecord],
    failure: SensorFailure,
) -> Result<Vec<FrameResult>> {
    records
        .par_iter()
        .map(|r| {
            let (cube, image) = simulate_sensor_failure(&r.cube, &r.image, failure);
            let input = prepare_input::<T>(&cube, &image, &model.config)?;
            let boxes = model.infer(&input)?;
            let mut detections: Vec<Box3D<f64>> = boxes.iter().map(Box3D::cast).collect();
            detections.sort_by(|a, b| b.score.total_cmp(&a.score));
            Ok(FrameResult {
                frame: r.name.clone(),
                condition: r.condition,
                daytime: r.daytime,
                detections,
                ground_truth: r.boxes.clone(),
            })
        })
        .collect()
}
