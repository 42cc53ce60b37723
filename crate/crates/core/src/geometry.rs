//! Oriented 3D boxes and polar/cartesian conversions in the ego frame.

use serde::{Deserialize, Serialize};

use crate::scalar::{cast, Scalar};

/// Polar ego-frame point: range in meters, azimuth and elevation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Polar<T> {
    pub range: T,
    pub azimuth: T,
    pub elevation: T,
}

impl<T: Scalar> Polar<T> {
    pub fn new(range: T, azimuth: T, elevation: T) -> Self {
        Self {
            range,
            azimuth,
            elevation,
        }
    }

    pub fn to_cartesian(self) -> [T; 3] {
        let ce = self.elevation.cos();
        [
            self.range * ce * self.azimuth.cos(),
            self.range * ce * self.azimuth.sin(),
            self.range * self.elevation.sin(),
        ]
    }

    pub fn from_cartesian(p: [T; 3]) -> Self {
        let [x, y, z] = p;
        let range = (x * x + y * y + z * z).sqrt();
        let elevation = if range > T::zero() {
            (z / range).max(-T::one()).min(T::one()).asin()
        } else {
            T::zero()
        };
        Self {
            range,
            azimuth: y.atan2(x),
            elevation,
        }
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle<T: Scalar>(theta: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut t = (theta + T::PI()) % two_pi;
    if t < T::zero() {
        t += two_pi;
    }
    let w = t - T::PI();
    if w >= T::PI() {
        -T::PI()
    } else {
        w
    }
}

/// Oriented box: centre `(x, y, z)`, size `(l, w, h)`, heading about +z
/// measured from +x, length along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D<T> {
    pub center: [T; 3],
    pub size: [T; 3],
    pub heading: T,
    #[serde(rename = "class")]
    pub class_id: usize,
    /// Confidence for predictions; 1 for ground truth.
    pub score: T,
}

impl<T: Scalar> Box3D<T> {
    pub fn new(center: [T; 3], size: [T; 3], heading: T, class_id: usize) -> Self {
        Self {
            center,
            size,
            heading,
            class_id,
            score: T::one(),
        }
    }

    pub fn with_score(mut self, score: T) -> Self {
        self.score = score;
        self
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[T; 2]; 4] {
        let half = T::of(0.5);
        let (hl, hw) = (self.size[0] * half, self.size[1] * half);
        let (s, c) = self.heading.sin_cos();
        let [cx, cy, _] = self.center;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(dx, dy)| [cx + dx * c - dy * s, cy + dx * s + dy * c])
    }

    /// All eight corners; bottom face first.
    pub fn corners(&self) -> [[T; 3]; 8] {
        let half = T::of(0.5);
        let bev = self.bev_corners();
        let (zb, zt) = (self.center[2] - self.size[2] * half, self.center[2] + self.size[2] * half);
        let mut out = [[T::zero(); 3]; 8];
        for (i, c) in bev.iter().enumerate() {
            out[i] = [c[0], c[1], zb];
            out[i + 4] = [c[0], c[1], zt];
        }
        out
    }

    pub fn z_range(&self) -> (T, T) {
        let half = self.size[2] * T::of(0.5);
        (self.center[2] - half, self.center[2] + half)
    }

    pub fn volume(&self) -> T {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn bev_area(&self) -> T {
        self.size[0] * self.size[1]
    }

    /// Ground-plane distance of the centre from the ego origin.
    pub fn bev_range(&self) -> T {
        self.center[0].hypot(self.center[1])
    }

    /// Whether a point lies inside the box (inclusive).
    pub fn contains(&self, p: [T; 3]) -> bool {
        let half = T::of(0.5);
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.size[0] * half
            && across.abs() <= self.size[1] * half
            && (p[2] - self.center[2]).abs() <= self.size[2] * half
    }

    pub fn cast<U: Scalar>(&self) -> Box3D<U> {
        Box3D {
            center: self.center.map(cast),
            size: self.size.map(cast),
            heading: cast(self.heading),
            class_id: self.class_id,
            score: cast(self.score),
        }
    }
}
