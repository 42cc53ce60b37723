//! Set-prediction loss: sigmoid focal classification plus L1 box regression
//! after optimal matching, summed over every head pass.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::detection::{HEADING, LOGITS, MIN_SIZE, SIZE};
use crate::error::Result;
use crate::geometry::Box3D;
use crate::matching::{match_hungarian, BoxNorm, MatchCost, MatchInput, MatchResult};
use crate::model::CycleOutput;
use crate::nn::Session;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Divisor for box sizes in the regression vector, meters.
    pub size_scale: f64,
    pub matcher: MatchCost,
    /// Supervise every head pass, not only the last one.
    pub auxiliary: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            size_scale: 10.0,
            matcher: MatchCost::default(),
            auxiliary: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub box_loss: f64,
    pub total: f64,
}

/// `total = class + box`, both weighted exactly 1.
pub fn total_loss(class_loss: f64, box_loss: f64) -> LossBreakdown {
    LossBreakdown {
        class_loss,
        box_loss,
        total: class_loss + box_loss,
    }
}

impl std::ops::Add for LossBreakdown {
    type Output = LossBreakdown;

    fn add(self, o: LossBreakdown) -> LossBreakdown {
        total_loss(self.class_loss + o.class_loss, self.box_loss + o.box_loss)
    }
}

/// Focal loss on probabilities, summed over entries and divided by
/// `max(num_matched, 1)`. `alpha = None` gives `alpha_t = 1`.
pub fn focal_loss(probs: &[f64], targets: &[bool], alpha: Option<f64>, gamma: f64, num_matched: usize) -> f64 {
    let sum: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let pt = if t { p } else { 1.0 - p };
            let at = match alpha {
                Some(a) if t => a,
                Some(a) => 1.0 - a,
                None => 1.0,
            };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    sum / num_matched.max(1) as f64
}

/// Mean over pairs of the summed absolute difference of normalised vectors.
pub fn l1_box_loss(pairs: &[([f64; 8], [f64; 8])]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|(p, g)| p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    sum / pairs.len() as f64
}

/// Tape nodes and matching of one head pass.
#[derive(Debug, Clone)]
pub struct CycleLoss {
    pub class_loss: Var,
    pub box_loss: Var,
    pub matching: MatchResult,
}

/// Match one pass against the ground truth and build its loss terms.
pub fn cycle_loss<T: Scalar>(
    s: &mut Session<'_, T>,
    cycle: &CycleOutput<T>,
    gts: &[Box3D<f64>],
    cfg: &LossConfig,
    norm: &BoxNorm,
) -> Result<CycleLoss> {
    let raw = s.value(cycle.raw).clone();
    let (n, width) = (raw.dim(0), raw.dim(1));
    let classes = width - LOGITS;
    let inputs: Vec<MatchInput> = raw
        .data()
        .chunks(width)
        .zip(&cycle.boxes)
        .map(|(row, b)| MatchInput::from_raw(row, b, norm))
        .collect();
    let targets: Vec<(usize, [f64; 8])> = gts.iter().map(|g| (g.class_id, norm.vector(g))).collect();
    let matching = match_hungarian(&inputs, &targets, &cfg.matcher)?;
    let np = matching.pairs.len();

    let mut cls_targets = vec![false; n * classes];
    for &(p, g) in &matching.pairs {
        cls_targets[p * classes + gts[g].class_id] = true;
    }
    let logits = s.tape.slice_cols(cycle.raw, LOGITS, classes);
    let focal = s
        .tape
        .focal_loss_sum(logits, &cls_targets, Some(T::of(cfg.alpha)), T::of(cfg.gamma), T::of(PROB_EPS));
    let class_loss = s.tape.scale(focal, T::of(1.0 / np.max(1) as f64));

    let box_loss = if np == 0 {
        s.constant(Tensor::scalar(T::zero()))
    } else {
        let rows: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
        let picked = s.tape.gather_rows(cycle.raw, &rows);
        let mut anchor = Vec::with_capacity(np * 3);
        let mut target = Vec::with_capacity(np * 8);
        for &(p, g) in &matching.pairs {
            anchor.extend(cycle.positions[p].to_cartesian());
            target.extend(targets[g].1.iter().map(|&v| T::of(v)));
        }
        let anchor = s.constant(Tensor::from_vec(&[np, 3], anchor).unwrap());
        let center = s.tape.slice_cols(picked, 0, 3);
        let center = s.tape.add(center, anchor);
        let center = s.tape.scale(center, T::of(1.0 / norm.range_max));
        let size = s.tape.slice_cols(picked, SIZE, 3);
        let size = s.tape.relu(size);
        let size = s.tape.clamp_min(size, T::of(MIN_SIZE));
        let size = s.tape.scale(size, T::of(1.0 / norm.size_scale));
        let heading = s.tape.slice_cols(picked, HEADING, 2);
        let heading = s.tape.tanh(heading);
        let pred = s.tape.concat_cols(&[center, size, heading]);
        let target = s.constant(Tensor::from_vec(&[np, 8], target).unwrap());
        let diff = s.tape.sub(pred, target);
        let diff = s.tape.abs(diff);
        let sum = s.tape.sum(diff);
        s.tape.scale(sum, T::of(1.0 / np as f64))
    };
    Ok(CycleLoss {
        class_loss,
        box_loss,
        matching,
    })
}

/// Loss of one sample over all supervised passes.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    /// Scalar to differentiate: the sum of class and box terms.
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub cycles: Vec<CycleLoss>,
}

pub fn detection_loss<T: Scalar>(
    s: &mut Session<'_, T>,
    cycles: &[CycleOutput<T>],
    gts: &[Box3D<f64>],
    cfg: &LossConfig,
    norm: &BoxNorm,
) -> Result<SampleLoss> {
    let supervised = if cfg.auxiliary { cycles } else { &cycles[cycles.len() - 1..] };
    let mut parts = Vec::with_capacity(supervised.len());
    for c in supervised {
        parts.push(cycle_loss(s, c, gts, cfg, norm)?);
    }
    let mut terms = Vec::with_capacity(2 * parts.len());
    let mut breakdown = LossBreakdown::default();
    for p in &parts {
        terms.push(p.class_loss);
        terms.push(p.box_loss);
        breakdown = breakdown + total_loss(s.value(p.class_loss).item().f64(), s.value(p.box_loss).item().f64());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = s.tape.add(total, t);
    }
    Ok(SampleLoss {
        total,
        breakdown,
        cycles: parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        let half = focal_loss(&[0.5], &[true], Some(0.25), 2.0, 1);
        assert!((half - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!(focal_loss(&[1.0], &[true], Some(0.25), 2.0, 1) < 1e-12);
        let p = 0.3;
        let bce = focal_loss(&[p], &[true], None, 0.0, 1);
        assert!((bce + p.ln()).abs() < 1e-12);
        // normalised by the number of matches
        let two = focal_loss(&[0.5, 0.5], &[true, true], Some(0.25), 2.0, 2);
        assert!((two - half).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let g = [0.0; 8];
        let mut p = g;
        p[0] = 7.2 / 72.0;
        assert!((l1_box_loss(&[(p, g)]) - 0.1).abs() < 1e-12);
        assert_eq!(l1_box_loss(&[]), 0.0);
        assert_eq!(total_loss(0.2, 0.3).total, 0.5);
    }

    #[test]
    fn heading_periodicity_in_vector() {
        let norm = BoxNorm {
            range_max: 72.0,
            size_scale: 10.0,
        };
        let a = Box3D::new([1.0, 2.0, 0.0], [4.0, 2.0, 1.5], 0.4, 0);
        let mut b = a;
        b.heading += 2.0 * std::f64::consts::PI;
        let (va, vb) = (norm.vector(&a), norm.vector(&b));
        assert!(va.iter().zip(&vb).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
