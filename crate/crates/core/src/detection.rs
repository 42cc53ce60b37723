//! Box regression head and decoding.
//!
//! Raw head rows are laid out `[center(3), size(3), sin, cos, logits(C)]`.
//! Decoding applies identity to the centre offset (added to the query's
//! cartesian position), ReLU with a floor to the size, tanh to the heading
//! pair and sigmoid to the class logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Var};
use crate::geometry::{wrap_angle, Box3D, Polar};
use crate::nn::{Builder, Linear, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CENTER: usize = 0;
pub const SIZE: usize = 3;
pub const HEADING: usize = 6;
pub const LOGITS: usize = 8;
/// Smallest decoded box side, meters.
pub const MIN_SIZE: f64 = 0.01;

/// One split row of raw head output.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeadOutput<T> {
    pub center: [T; 3],
    pub size: [T; 3],
    /// `(sin-logit, cos-logit)`.
    pub heading: [T; 2],
    pub logits: Vec<T>,
}

impl<T: Scalar> RawHeadOutput<T> {
    pub fn from_row(row: &[T]) -> Self {
        Self {
            center: [row[0], row[1], row[2]],
            size: [row[3], row[4], row[5]],
            heading: [row[6], row[7]],
            logits: row[LOGITS..].to_vec(),
        }
    }

    pub fn to_row(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(LOGITS + self.logits.len());
        v.extend_from_slice(&self.center);
        v.extend_from_slice(&self.size);
        v.extend_from_slice(&self.heading);
        v.extend_from_slice(&self.logits);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Initial size bias, meters (l, w, h).
    pub size_prior: [f64; 3],
    /// Initial foreground probability of every class logit.
    pub class_prior: f64,
    /// Fixed multipliers on the last layer's center, size, heading and
    /// class outputs. The layer is initialised at `1 / gain` scale, so the
    /// initial function does not depend on them; a larger gain makes that
    /// output respond faster to the optimiser.
    pub output_gain: [f64; 4],
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            size_prior: [7.0, 2.2, 2.3],
            class_prior: 0.01,
            output_gain: [40.0, 4.0, 1.0, 4.0],
        }
    }
}

/// Three stacked linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub num_classes: usize,
    /// Per-output multiplier, `8 + C` entries.
    pub gain: Vec<f64>,
}

impl DetectionHead {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, dim: usize, num_classes: usize, cfg: &HeadConfig) -> Self {
        b.scope("head", |b| {
            let fc1 = Linear::new(b, "fc1", dim, cfg.hidden);
            let fc2 = Linear::new(b, "fc2", cfg.hidden, cfg.hidden);
            let out = LOGITS + num_classes;
            let [gc, gs, gh, gl] = cfg.output_gain;
            let mut gain = vec![gc, gc, gc, gs, gs, gs, gh, gh];
            gain.resize(out, gl);
            let prior_logit = -((1.0 - cfg.class_prior) / cfg.class_prior).ln();
            let mut bias = vec![0.0; out];
            bias[SIZE..SIZE + 3].copy_from_slice(&cfg.size_prior);
            for v in &mut bias[LOGITS..] {
                *v = prior_logit;
            }
            for (v, g) in bias.iter_mut().zip(&gain) {
                *v /= g;
            }
            let fc3 = b.scope("fc3", |b| {
                let bound = 1.0 / (cfg.hidden as f64).sqrt();
                let weight = b.uniform("weight", &[out, cfg.hidden], bound);
                for (row, g) in b.store.get_mut(weight).data_mut().chunks_mut(cfg.hidden).zip(&gain) {
                    row.iter_mut().for_each(|v| *v = *v / T::of(*g));
                }
                Linear {
                    weight,
                    bias: b.constant("bias", Tensor::from_vec(&[out], bias.into_iter().map(T::of).collect()).unwrap()),
                    in_dim: cfg.hidden,
                    out_dim: out,
                }
            });
            Self {
                fc1,
                fc2,
                fc3,
                num_classes,
                gain,
            }
        })
    }

    /// `x: [N, D] -> [N, 8 + C]` raw outputs.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.tape.relu(h);
        let h = self.fc2.forward(s, h);
        let h = s.tape.relu(h);
        let y = self.fc3.forward(s, h);
        if self.gain.iter().all(|&g| g == 1.0) {
            return y;
        }
        let gain = s.constant(Tensor::from_vec(&[self.gain.len()], self.gain.iter().map(|&g| T::of(g)).collect()).unwrap());
        s.tape.mul_row(y, gain)
    }
}

/// Decode one raw row anchored at `position`.
pub fn decode_box<T: Scalar>(raw: &RawHeadOutput<T>, position: Polar<T>) -> Box3D<T> {
    let anchor = position.to_cartesian();
    let eps = T::of(MIN_SIZE);
    let center = [0, 1, 2].map(|i| anchor[i] + raw.center[i]);
    let size = raw.size.map(|v| v.max(T::zero()).max(eps));
    let heading = wrap_angle(raw.heading[0].tanh().atan2(raw.heading[1].tanh()));
    let (mut class_id, mut score) = (0, T::neg_infinity());
    for (c, &l) in raw.logits.iter().enumerate() {
        let p = sigmoid(l);
        if p > score {
            class_id = c;
            score = p;
        }
    }
    Box3D {
        center,
        size,
        heading,
        class_id,
        score,
    }
}

/// Decode every row of a `[N, 8 + C]` raw tensor.
pub fn decode_boxes<T: Scalar>(raw: &Tensor<T>, positions: &[Polar<T>]) -> Vec<Box3D<T>> {
    let width = raw.dim(1);
    raw.data()
        .chunks(width)
        .zip(positions)
        .map(|(row, &p)| decode_box(&RawHeadOutput::from_row(row), p))
        .collect()
}

/// Per-frame prediction list as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame: String,
    pub detections: Vec<Box3D<f64>>,
}

impl DetectionSet {
    /// Keep boxes scoring at least `min_score`, highest score first.
    pub fn new<T: Scalar>(frame: impl Into<String>, boxes: &[Box3D<T>], min_score: f64) -> Self {
        let mut detections: Vec<Box3D<f64>> = boxes
            .iter()
            .map(Box3D::cast)
            .filter(|b: &Box3D<f64>| b.score >= min_score)
            .collect();
        detections.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self {
            frame: frame.into(),
            detections,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn raw(sin: f64, cos: f64, size: [f64; 3]) -> RawHeadOutput<f64> {
        RawHeadOutput {
            center: [0.5, -0.5, 0.1],
            size,
            heading: [sin, cos],
            logits: vec![-1.0, 2.0],
        }
    }

    #[test]
    fn heading_examples() {
        let p = Polar::new(10.0, 0.0, 0.0);
        assert_eq!(decode_box(&raw(0.0, 50.0, [1.0; 3]), p).heading, 0.0);
        assert!((decode_box(&raw(50.0, 0.0, [1.0; 3]), p).heading - PI / 2.0).abs() < 1e-12);
        let b = decode_box(&raw(0.0, -50.0, [1.0; 3]), p);
        assert!(b.heading >= -PI && b.heading < PI);
    }

    #[test]
    fn negative_sizes_hit_floor() {
        let b = decode_box(&raw(0.0, 1.0, [-1.0, -3.0, -0.2]), Polar::new(5.0, 0.0, 0.0));
        assert_eq!(b.size, [MIN_SIZE; 3]);
        assert_eq!(b.center, [5.5, -0.5, 0.1]);
        assert_eq!(b.class_id, 1);
        assert!((b.score - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_head_gives_zero_raw() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = DetectionHead::new(&mut Builder::new(&mut store, &mut rng), 8, 3, &HeadConfig::default());
        for p in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut s = Session::inference(&store);
        let x = s.constant(Tensor::full(&[5, 8], 0.3));
        let y = head.forward(&mut s, x);
        assert_eq!(s.value(y).shape(), &[5, 11]);
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_biases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HeadConfig::default();
        let head = DetectionHead::new(&mut Builder::new(&mut store, &mut rng), 8, 2, &cfg);
        // a zero hidden state leaves only the bias, scaled back by the gain
        for p in store.iter_mut().filter(|p| !p.name.starts_with("head.fc3")) {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut s = Session::inference(&store);
        let x = s.constant(Tensor::full(&[1, 8], 0.5));
        let y = head.forward(&mut s, x);
        let raw = RawHeadOutput::from_row(s.value(y).data());
        for (got, want) in raw.size.iter().zip(&cfg.size_prior) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((sigmoid(raw.logits[0]) - cfg.class_prior).abs() < 1e-12);
    }
}
