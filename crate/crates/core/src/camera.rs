//! Pinhole camera model, camera frames and image resizing.
//!
//! Ego frame: x forward, y left, z up. Camera frame: X right, Y down, Z along
//! the optical axis. Pixel coordinates are continuous with the origin at the
//! top-left image corner, so pixel `(i, j)` covers `[j, j+1) x [i, i+1)`.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Scalar> Intrinsics<T> {
    pub fn matrix(&self) -> [[T; 3]; 3] {
        let (z, o) = (T::zero(), T::one());
        [[self.fx, z, self.cx], [z, self.fy, self.cy], [z, z, o]]
    }

    pub fn cast<U: Scalar>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: cast(self.fx),
            fy: cast(self.fy),
            cx: cast(self.cx),
            cy: cast(self.cy),
        }
    }
}

/// Rigid transform ego -> camera: `p_cam = rotation * p_ego + translation`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Extrinsics<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Scalar> Extrinsics<T> {
    /// Forward-looking camera whose optical centre sits at `position` in the ego frame.
    pub fn forward_facing(position: [T; 3]) -> Self {
        let (z, o) = (T::zero(), T::one());
        // X_c = -y, Y_c = -z, Z_c = x
        let rotation = [[z, -o, z], [z, z, -o], [o, z, z]];
        let mut translation = [z; 3];
        for (i, t) in translation.iter_mut().enumerate() {
            *t = -(0..3).map(|j| rotation[i][j] * position[j]).sum::<T>();
        }
        Self { rotation, translation }
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &pj) in p.iter().enumerate() {
                *o += self.rotation[i][j] * pj;
            }
        }
        out
    }

    pub fn is_proper_rotation(&self, tol: T) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: T = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { T::one() } else { T::zero() };
                if (dot - want).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - T::one()).abs() <= tol
    }

    pub fn cast<U: Scalar>(&self) -> Extrinsics<U> {
        Extrinsics {
            rotation: self.rotation.map(|row| row.map(cast)),
            translation: self.translation.map(cast),
        }
    }
}

/// Calibration shared by frames from the same camera.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraModel<T> {
    pub intrinsics: Intrinsics<T>,
    pub extrinsics: Extrinsics<T>,
    pub width: usize,
    pub height: usize,
}

/// Smallest camera-frame depth that still projects.
pub const MIN_DEPTH: f64 = 1e-6;

impl<T: Scalar> CameraModel<T> {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > T::zero() && k.fy > T::zero()) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if !(k.cx >= T::zero() && k.cx < T::of(self.width as f64) && k.cy >= T::zero() && k.cy < T::of(self.height as f64)) {
            return Err(Error::Invalid("principal point outside the image".into()));
        }
        if !self.extrinsics.is_proper_rotation(T::of(1e-6)) {
            return Err(Error::Invalid("extrinsic rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Pixel `(u, v)` of an ego-frame point, or `None` when it lies behind
    /// the camera. Points in front of the camera but outside the image still
    /// return coordinates.
    pub fn project(&self, ego: [T; 3]) -> Option<(T, T)> {
        let [x, y, z] = self.extrinsics.apply(ego);
        if z <= T::of(MIN_DEPTH) {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * x / z + k.cx, k.fy * y / z + k.cy))
    }

    pub fn in_image(&self, u: T, v: T) -> bool {
        u >= T::zero() && v >= T::zero() && u <= T::of(self.width as f64) && v <= T::of(self.height as f64)
    }

    pub fn cast<U: Scalar>(&self) -> CameraModel<U> {
        CameraModel {
            intrinsics: self.intrinsics.cast(),
            extrinsics: self.extrinsics.cast(),
            width: self.width,
            height: self.height,
        }
    }
}

/// RGB image (`[H, W, 3]`, values in `[0, 1]`) with its calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame<T> {
    pub pixels: Tensor<T>,
    pub intrinsics: Intrinsics<T>,
    pub extrinsics: Extrinsics<T>,
}

impl<T: Scalar> CameraFrame<T> {
    pub fn new(pixels: Tensor<T>, intrinsics: Intrinsics<T>, extrinsics: Extrinsics<T>) -> Result<Self> {
        if pixels.shape().len() != 3 || pixels.dim(2) != 3 {
            return Err(Error::Shape(format!("camera pixels must be [H, W, 3], got {:?}", pixels.shape())));
        }
        let frame = Self {
            pixels,
            intrinsics,
            extrinsics,
        };
        frame.model().validate()?;
        Ok(frame)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn model(&self) -> CameraModel<T> {
        CameraModel {
            intrinsics: self.intrinsics,
            extrinsics: self.extrinsics,
            width: self.width(),
            height: self.height(),
        }
    }

    /// Channel-first `[3, H, W]` copy.
    pub fn to_chw(&self) -> Tensor<T> {
        let (h, w) = (self.height(), self.width());
        let mut out = vec![T::zero(); 3 * h * w];
        for (i, px) in self.pixels.data().chunks(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * h * w + i] = v;
            }
        }
        Tensor::from_vec(&[3, h, w], out).unwrap()
    }

    pub fn zeroed(&self) -> Self {
        Self {
            pixels: Tensor::zeros(self.pixels.shape()),
            ..self.clone()
        }
    }

    pub fn mean_intensity(&self) -> T {
        self.pixels.sum() / T::of(self.pixels.len() as f64)
    }

    pub fn cast<U: Scalar>(&self) -> CameraFrame<U> {
        CameraFrame {
            pixels: self.pixels.cast(),
            intrinsics: self.intrinsics.cast(),
            extrinsics: self.extrinsics.cast(),
        }
    }
}

/// Bilinear resize to `target_height`, keeping the aspect ratio, with the
/// intrinsics scaled by the same per-axis factors.
pub fn resize_image<T: Scalar>(frame: &CameraFrame<T>, target_height: usize) -> Result<CameraFrame<T>> {
    if target_height < 2 {
        return Err(Error::Invalid(format!("target height {target_height} < 2")));
    }
    let (h, w) = (frame.height(), frame.width());
    if target_height == h {
        return Ok(frame.clone());
    }
    let new_w = ((w as f64) * target_height as f64 / h as f64).round().max(1.0) as usize;
    let new_h = target_height;
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    let src = frame.pixels.data();
    let mut out = Vec::with_capacity(new_h * new_w * 3);
    let coord = |dst: usize, scale: f64, n: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, T::of(s - i0 as f64))
    };
    for y in 0..new_h {
        let (y0, y1, fy) = coord(y, sy, h);
        for x in 0..new_w {
            let (x0, x1, fx) = coord(x, sx, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    let (kx, ky) = (T::of(new_w as f64 / w as f64), T::of(new_h as f64 / h as f64));
    let k = frame.intrinsics;
    Ok(CameraFrame {
        pixels: Tensor::from_vec(&[new_h, new_w, 3], out)?,
        intrinsics: Intrinsics {
            fx: k.fx * kx,
            fy: k.fy * ky,
            cx: k.cx * kx,
            cy: k.cy * ky,
        },
        extrinsics: frame.extrinsics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, fill: f64) -> CameraFrame<f64> {
        CameraFrame::new(
            Tensor::full(&[h, w, 3], fill),
            Intrinsics {
                fx: 800.0,
                fy: 800.0,
                cx: w as f64 / 2.0,
                cy: h as f64 / 2.0,
            },
            Extrinsics::forward_facing([0.0, 0.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn resize_halves_intrinsics() {
        let f = frame(1024, 2048, 0.3);
        let r = resize_image(&f, 512).unwrap();
        assert_eq!((r.height(), r.width()), (512, 1024));
        assert_eq!(r.intrinsics.fx, 400.0);
        assert_eq!(r.intrinsics.fy, 400.0);
        assert_eq!(r.intrinsics.cx, 512.0);
        assert_eq!(r.intrinsics.cy, 256.0);
        assert!(r.pixels.data().iter().all(|&p| (p - 0.3).abs() < 1e-12));
    }

    #[test]
    fn resize_to_same_height_is_identity() {
        let mut f = frame(8, 12, 0.0);
        for (i, p) in f.pixels.data_mut().iter_mut().enumerate() {
            *p = (i % 7) as f64 / 7.0;
        }
        assert_eq!(resize_image(&f, 8).unwrap(), f);
        assert!(resize_image(&f, 1).is_err());
    }

    #[test]
    fn forward_camera_is_proper_rotation() {
        let e = Extrinsics::forward_facing([1.0, 0.0, 0.5]);
        assert!(e.is_proper_rotation(1e-12));
        assert_eq!(e.apply([11.0, 0.0, 0.5]), [0.0, 0.0, 10.0]);
    }

    #[test]
    fn projection_of_optical_axis_hits_principal_point() {
        let f = frame(100, 200, 0.0);
        let m = f.model();
        assert_eq!(m.project([10.0, 0.0, 0.0]), Some((100.0, 50.0)));
        assert_eq!(m.project([-1.0, 0.0, 0.0]), None);
    }

    #[test]
    fn invalid_calibration_is_rejected() {
        let mut k = frame(10, 10, 0.0).intrinsics;
        k.fx = -1.0;
        assert!(CameraFrame::new(Tensor::zeros(&[10, 10, 3]), k, Extrinsics::forward_facing([0.0; 3])).is_err());
    }
}
