//! Rotated-box overlap: BEV rectangles clipped as convex polygons, plus the
//! vertical overlap for 3D IoU.

use crate::geometry::Box3D;
use crate::scalar::Scalar;

/// Signed area of a polygon (positive for counter-clockwise order).
pub fn polygon_area<T: Scalar>(poly: &[[T; 2]]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let mut s = T::zero();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    s * T::of(0.5)
}

fn cross<T: Scalar>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Intersection of two convex counter-clockwise polygons
/// (Sutherland-Hodgman clipping of `subject` by every edge of `clip`).
pub fn clip_convex<T: Scalar>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= T::zero();
            let prev_in = cross(a, b, prev) >= T::zero();
            if cur_in {
                if !prev_in {
                    output.push(line_hit(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_hit(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection of segment `p -> q` with the infinite line through `a, b`.
fn line_hit<T: Scalar>(p: [T; 2], q: [T; 2], a: [T; 2], b: [T; 2]) -> [T; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom == T::zero() {
        return q;
    }
    let t = cp / denom;
    [p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]
}

/// Area of the BEV footprint intersection.
pub fn bev_intersection<T: Scalar>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    // cheap reject on bounding circles
    let half = T::of(0.5);
    let ra = a.size[0].hypot(a.size[1]) * half;
    let rb = b.size[0].hypot(b.size[1]) * half;
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if d > ra + rb {
        return T::zero();
    }
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    polygon_area(&poly).max(T::zero())
}

pub fn iou_bev<T: Scalar>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let inter = bev_intersection(a, b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

pub fn iou_3d<T: Scalar>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(T::zero());
    if dz <= T::zero() {
        return T::zero();
    }
    let inter = bev_intersection(a, b) * dz;
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.volume() + b.volume() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}
