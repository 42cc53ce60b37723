//! Optimal one-to-one assignment of predictions to ground truths.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::scalar::Scalar;

/// Minimum-cost assignment of every row to a distinct column of a
/// `rows x cols` matrix (`rows <= cols`), via shortest augmenting paths with
/// potentials. Returns the column of each row.
pub fn assign_rows(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "more rows than columns");
    assert_eq!(cost.len(), rows * cols);
    if rows == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based potentials; column 0 is a virtual start
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; rows];
    for j in 1..=cols {
        if owner[j] > 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction, ground truth)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchCost {
    pub class_weight: f64,
    pub box_weight: f64,
    /// Use the focal-style class cost instead of `-p`.
    pub focal: bool,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self {
            class_weight: 1.0,
            box_weight: 1.0,
            focal: false,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Scales that bring every box component to order one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxNorm {
    pub range_max: f64,
    pub size_scale: f64,
}

impl BoxNorm {
    /// `[x, y, z] / range_max, [l, w, h] / size_scale, sin, cos`.
    pub fn vector<T: Scalar>(&self, b: &Box3D<T>) -> [f64; 8] {
        let (s, c) = b.heading.f64().sin_cos();
        self.vector_with_heading(b, s, c)
    }

    /// As [`vector`](Self::vector) with an explicit heading pair (predictions
    /// use the raw tanh outputs).
    pub fn vector_with_heading<T: Scalar>(&self, b: &Box3D<T>, sin: f64, cos: f64) -> [f64; 8] {
        [
            b.center[0].f64() / self.range_max,
            b.center[1].f64() / self.range_max,
            b.center[2].f64() / self.range_max,
            b.size[0].f64() / self.size_scale,
            b.size[1].f64() / self.size_scale,
            b.size[2].f64() / self.size_scale,
            sin,
            cos,
        ]
    }
}

/// What the matcher needs per prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchInput {
    /// Per-class probabilities.
    pub probs: Vec<f64>,
    /// Normalised 8-vector.
    pub vector: [f64; 8],
}

impl MatchInput {
    pub fn from_raw<T: Scalar>(raw_row: &[T], decoded: &Box3D<T>, norm: &BoxNorm) -> Self {
        let h = crate::detection::HEADING;
        let (s, c) = (raw_row[h].f64().tanh(), raw_row[h + 1].f64().tanh());
        Self {
            probs: raw_row[crate::detection::LOGITS..]
                .iter()
                .map(|&l| sigmoid(l.f64()))
                .collect(),
            vector: norm.vector_with_heading(decoded, s, c),
        }
    }
}

/// Cost matrix `[num_gt, num_pred]`.
pub fn cost_matrix(preds: &[MatchInput], gts: &[(usize, [f64; 8])], cfg: &MatchCost) -> Vec<f64> {
    let mut cost = Vec::with_capacity(preds.len() * gts.len());
    for &(class, gv) in gts {
        for p in preds {
            let prob = p.probs[class];
            let class_cost = if cfg.focal {
                let pos = cfg.alpha * (1.0 - prob).powf(cfg.gamma) * -(prob + 1e-8).ln();
                let neg = (1.0 - cfg.alpha) * prob.powf(cfg.gamma) * -(1.0 - prob + 1e-8).ln();
                pos - neg
            } else {
                -prob
            };
            let l1: f64 = p.vector.iter().zip(&gv).map(|(a, b)| (a - b).abs()).sum();
            cost.push(cfg.class_weight * class_cost + cfg.box_weight * l1);
        }
    }
    cost
}

/// Optimal matching of predictions to ground truths.
pub fn match_hungarian(preds: &[MatchInput], gts: &[(usize, [f64; 8])], cfg: &MatchCost) -> Result<MatchResult> {
    if gts.len() > preds.len() {
        return Err(Error::TooManyTargets {
            gts: gts.len(),
            preds: preds.len(),
        });
    }
    let cost = cost_matrix(preds, gts, cfg);
    Ok(pairs_from_assignment(&assign_rows(&cost, gts.len(), preds.len()), preds.len()))
}

/// Matching over a precomputed `[num_gt, num_pred]` cost matrix.
pub fn match_cost_matrix(cost: &[f64], num_gt: usize, num_pred: usize) -> Result<MatchResult> {
    if num_gt > num_pred {
        return Err(Error::TooManyTargets {
            gts: num_gt,
            preds: num_pred,
        });
    }
    Ok(pairs_from_assignment(&assign_rows(cost, num_gt, num_pred), num_pred))
}

fn pairs_from_assignment(cols: &[usize], num_pred: usize) -> MatchResult {
    let mut pairs: Vec<(usize, usize)> = cols.iter().enumerate().map(|(g, &p)| (p, g)).collect();
    pairs.sort_unstable();
    let mut taken = vec![false; num_pred];
    for &(p, _) in &pairs {
        taken[p] = true;
    }
    MatchResult {
        pairs,
        unmatched_predictions: (0..num_pred).filter(|&p| !taken[p]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
            if r == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[r * cols + c] + rec(cost, rows, cols, r + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, rows, cols, 0, &mut vec![false; cols])
    }

    #[test]
    fn small_square_case() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = assign_rows(&cost, 3, 3);
        let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * 3 + c]).sum();
        assert_eq!(total, brute(&cost, 3, 3));
        assert_eq!(total, 5.0);
    }

    #[test]
    fn rectangular_case() {
        let cost = [9.0, 2.0, 7.0, 1.0, 3.0, 8.0, 1.0, 9.0];
        let a = assign_rows(&cost, 2, 4);
        let total: f64 = a.iter().enumerate().map(|(r, &c)| cost[r * 4 + c]).sum();
        assert_eq!(total, brute(&cost, 2, 4));
    }

    #[test]
    fn identical_prediction_matches() {
        let norm = BoxNorm {
            range_max: 72.0,
            size_scale: 10.0,
        };
        let gt = Box3D::new([10.0f64, 1.0, -0.2], [4.5, 1.8, 1.5], 0.3, 1);
        let v = norm.vector(&gt);
        let pred = MatchInput {
            probs: vec![0.1, 0.7],
            vector: v,
        };
        let cost = cost_matrix(std::slice::from_ref(&pred), &[(1, v)], &MatchCost::default());
        assert!((cost[0] + 0.7).abs() < 1e-15);
        let m = match_hungarian(&[pred], &[(1, v)], &MatchCost::default()).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!(m.unmatched_predictions.is_empty());
    }

    #[test]
    fn empty_and_oversubscribed() {
        let p = MatchInput {
            probs: vec![0.5],
            vector: [0.0; 8],
        };
        let m = match_hungarian(&[p.clone(), p.clone()], &[], &MatchCost::default()).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_predictions, vec![0, 1]);
        assert!(matches!(
            match_hungarian(&[p], &[(0, [0.0; 8]), (0, [0.0; 8])], &MatchCost::default()),
            Err(Error::TooManyTargets { gts: 2, preds: 1 })
        ));
    }
}
