//! Synthetic scenes: random box layouts with matching camera frames and
//! radar cubes. Rendering is intentionally crude (flat silhouettes, Gaussian
//! power blobs); it exists to exercise the detection pipeline end to end.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraFrame, CameraModel, Extrinsics, Intrinsics};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box3D, Polar};
use crate::iou::iou_bev;
use crate::radar::RadarCube;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Normal,
    Overcast,
    Fog,
    Rain,
    Sleet,
    LightSnow,
    HeavySnow,
}

impl Condition {
    pub const ALL: [Condition; 7] = [
        Condition::Normal,
        Condition::Overcast,
        Condition::Fog,
        Condition::Rain,
        Condition::Sleet,
        Condition::LightSnow,
        Condition::HeavySnow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Overcast => "overcast",
            Condition::Fog => "fog",
            Condition::Rain => "rain",
            Condition::Sleet => "sleet",
            Condition::LightSnow => "light_snow",
            Condition::HeavySnow => "heavy_snow",
        }
    }

    /// `(contrast loss, pixel noise std)` applied to camera frames.
    fn camera_degradation(self) -> (f64, f64) {
        match self {
            Condition::Normal => (0.0, 0.0),
            Condition::Overcast => (0.1, 0.0),
            Condition::Fog => (0.6, 0.02),
            Condition::Rain => (0.2, 0.05),
            Condition::Sleet => (0.3, 0.06),
            Condition::LightSnow => (0.25, 0.05),
            Condition::HeavySnow => (0.45, 0.08),
        }
    }

    /// Multiplier on the radar noise floor.
    fn radar_noise_gain(self) -> f64 {
        match self {
            Condition::Normal | Condition::Overcast => 1.0,
            Condition::Fog => 1.1,
            Condition::Rain | Condition::LightSnow => 1.3,
            Condition::Sleet => 1.4,
            Condition::HeavySnow => 1.6,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown condition '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Daytime {
    Day,
    Night,
}

impl Daytime {
    pub const ALL: [Daytime; 2] = [Daytime::Day, Daytime::Night];

    pub fn name(self) -> &'static str {
        match self {
            Daytime::Day => "day",
            Daytime::Night => "night",
        }
    }
}

/// Object class with uniform size ranges `[lo, hi]` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
    /// Camera silhouette colour.
    pub color: [f64; 3],
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "sedan".into(),
            length: [4.0, 5.0],
            width: [1.7, 2.0],
            height: [1.4, 1.7],
            color: [0.85, 0.2, 0.2],
        },
        ClassSpec {
            name: "bus_or_truck".into(),
            length: [8.0, 12.0],
            width: [2.4, 2.6],
            height: [2.8, 3.4],
            color: [0.2, 0.3, 0.85],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarSpec {
    /// Half-angle of the azimuth field of view, radians.
    pub fov_azimuth: f64,
    /// Half-angle of the elevation field of view, radians.
    pub fov_elevation: f64,
    pub range_max: f64,
    pub range_bins: usize,
    pub azimuth_bins: usize,
    pub elevation_bins: usize,
    pub doppler_bins: usize,
    /// Velocity step between Doppler bins, m/s.
    pub doppler_resolution: f64,
    /// Mean of the exponential noise floor, relative to a blob peak of 1.
    pub noise_floor: f64,
}

impl Default for RadarSpec {
    fn default() -> Self {
        Self {
            fov_azimuth: 50f64.to_radians(),
            fov_elevation: 15f64.to_radians(),
            range_max: 72.0,
            range_bins: 64,
            azimuth_bins: 32,
            elevation_bins: 16,
            doppler_bins: 8,
            doppler_resolution: 1.0,
            noise_floor: 0.01,
        }
    }
}

impl RadarSpec {
    pub fn range_resolution(&self) -> f64 {
        self.range_max / self.range_bins as f64
    }

    pub fn azimuth_resolution(&self) -> f64 {
        2.0 * self.fov_azimuth / self.azimuth_bins as f64
    }

    pub fn elevation_resolution(&self) -> f64 {
        2.0 * self.fov_elevation / self.elevation_bins as f64
    }

    /// Bin centres of the four cube axes.
    pub fn axes(&self) -> [Vec<f64>; 4] {
        let centers = |n: usize, lo: f64, step: f64| (0..n).map(|i| lo + (i as f64 + 0.5) * step).collect();
        let dop = (0..self.doppler_bins)
            .map(|i| (i as f64 - (self.doppler_bins / 2) as f64) * self.doppler_resolution)
            .collect();
        [
            centers(self.range_bins, 0.0, self.range_resolution()),
            centers(self.azimuth_bins, -self.fov_azimuth, self.azimuth_resolution()),
            centers(self.elevation_bins, -self.fov_elevation, self.elevation_resolution()),
            dop,
        ]
    }

    /// Inclusive velocity span covered by the Doppler axis.
    pub fn doppler_span(&self) -> (f64, f64) {
        let ax = &self.axes()[3];
        (ax[0], ax[ax.len() - 1])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range_max > 0.0) {
            return Err(Error::Invalid("range_max must be positive".into()));
        }
        if !(self.fov_azimuth > 0.0 && self.fov_elevation > 0.0) {
            return Err(Error::Invalid("field of view half-angles must be positive".into()));
        }
        if [self.range_bins, self.azimuth_bins, self.elevation_bins, self.doppler_bins].contains(&0) {
            return Err(Error::Invalid("bin counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorRig {
    pub camera: CameraModel<f64>,
    pub radar: RadarSpec,
    /// Ground plane height in the ego frame (the radar sits at the origin).
    pub ground_z: f64,
}

impl Default for SensorRig {
    fn default() -> Self {
        let (width, height) = (256, 128);
        Self {
            camera: CameraModel {
                intrinsics: Intrinsics {
                    fx: 108.0,
                    fy: 108.0,
                    cx: width as f64 / 2.0,
                    cy: height as f64 / 2.0,
                },
                extrinsics: Extrinsics::forward_facing([0.0, 0.0, 0.3]),
                width,
                height,
            },
            radar: RadarSpec::default(),
            ground_z: -1.0,
        }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.radar.validate()
    }

    /// Half-angle of the camera's horizontal field of view.
    pub fn camera_fov_azimuth(&self) -> f64 {
        let k = &self.camera.intrinsics;
        k.cx.min(self.camera.width as f64 - k.cx).atan2(k.fx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(flatten)]
    pub bbox: Box3D<f64>,
    /// Radial velocity, m/s (positive = receding).
    pub radial_velocity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub condition: Condition,
    pub daytime: Daytime,
    pub seed: u64,
}

impl Scene {
    pub fn boxes(&self) -> Vec<Box3D<f64>> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ClassSpec>,
    /// Object centre ground range bounds, meters.
    pub min_range: f64,
    pub max_range: f64,
    /// Keep centres this far (radians) inside the azimuth field of view.
    pub azimuth_margin: f64,
    pub min_center_distance: f64,
    /// Largest BEV IoU tolerated between two objects.
    pub max_overlap: f64,
    /// Relative weights per condition, in `Condition::ALL` order.
    pub condition_weights: [f64; 7],
    pub night_fraction: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 4,
            classes: default_classes(),
            min_range: 6.0,
            max_range: 64.0,
            azimuth_margin: 6f64.to_radians(),
            min_center_distance: 4.0,
            max_overlap: 0.1,
            condition_weights: [1.0; 7],
            night_fraction: 0.3,
            max_attempts: 200,
        }
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Sample a scene. Identical `(seed, config, rig)` give identical scenes.
pub fn generate_scene(seed: u64, config: &SceneConfig, rig: &SensorRig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let condition = Condition::ALL[pick_weighted(&mut rng, &config.condition_weights)];
    let daytime = if rng.random::<f64>() < config.night_fraction {
        Daytime::Night
    } else {
        Daytime::Day
    };
    let count = if config.max_objects > config.min_objects {
        rng.random_range(config.min_objects..=config.max_objects)
    } else {
        config.max_objects
    };
    let az_limit = rig.radar.fov_azimuth.min(rig.camera_fov_azimuth()) - config.azimuth_margin;
    let (v_lo, v_hi) = rig.radar.doppler_span();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    if count > 0 && config.classes.is_empty() {
        return Err(Error::Invalid("scene config has no classes".into()));
    }
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..config.max_attempts {
            let class_id = rng.random_range(0..config.classes.len());
            let spec = &config.classes[class_id];
            let size = [
                uniform(&mut rng, spec.length),
                uniform(&mut rng, spec.width),
                uniform(&mut rng, spec.height),
            ];
            let ground_range = uniform(&mut rng, [config.min_range, config.max_range]);
            let azimuth = uniform(&mut rng, [-az_limit, az_limit]);
            let heading = wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            let velocity = uniform(&mut rng, [v_lo, v_hi]);
            let center = [
                ground_range * azimuth.cos(),
                ground_range * azimuth.sin(),
                rig.ground_z + size[2] / 2.0,
            ];
            let candidate = Box3D::new(center, size, heading, class_id);
            let clear = objects.iter().all(|o| {
                let d = (o.bbox.center[0] - center[0]).hypot(o.bbox.center[1] - center[1]);
                d >= config.min_center_distance && iou_bev(&o.bbox, &candidate) <= config.max_overlap
            });
            if clear {
                objects.push(SceneObject {
                    bbox: candidate,
                    radial_velocity: velocity,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement { seed, requested: count });
        }
    }
    Ok(Scene {
        objects,
        condition,
        daytime,
        seed,
    })
}

const BACKGROUND: [f64; 3] = [0.55, 0.55, 0.5];
const NIGHT_FACTOR: f64 = 0.35;

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = hull.len();
    n >= 3
        && (0..n).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
}

/// Pixel-space convex silhouette of a box, or `None` if any corner is behind the camera.
pub fn box_silhouette(camera: &CameraModel<f64>, b: &Box3D<f64>) -> Option<Vec<[f64; 2]>> {
    let pts = b
        .corners()
        .iter()
        .map(|&c| camera.project(c).map(|(u, v)| [u, v]))
        .collect::<Option<Vec<_>>>()?;
    Some(convex_hull(pts))
}

/// Flat background with filled class-coloured box silhouettes (far to near),
/// darkened at night and degraded by weather.
pub fn render_camera<T: Scalar>(scene: &Scene, rig: &SensorRig, classes: &[ClassSpec]) -> CameraFrame<T> {
    let cam = &rig.camera;
    let (w, h) = (cam.width, cam.height);
    let mut img = vec![0f64; h * w * 3];
    for px in img.chunks_mut(3) {
        px.copy_from_slice(&BACKGROUND);
    }
    let mut order: Vec<&SceneObject> = scene.objects.iter().collect();
    order.sort_by(|a, b| b.bbox.bev_range().partial_cmp(&a.bbox.bev_range()).unwrap());
    for obj in order {
        let Some(hull) = box_silhouette(cam, &obj.bbox) else {
            continue;
        };
        let color = classes
            .get(obj.bbox.class_id)
            .map(|c| c.color)
            .unwrap_or([1.0, 1.0, 1.0]);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            u0 = u0.min(p[0]);
            u1 = u1.max(p[0]);
            v0 = v0.min(p[1]);
            v1 = v1.max(p[1]);
        }
        let x0 = u0.floor().max(0.0) as usize;
        let x1 = (u1.ceil().max(0.0) as usize).min(w);
        let y0 = v0.floor().max(0.0) as usize;
        let y1 = (v1.ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if inside_convex(&hull, [x as f64 + 0.5, y as f64 + 0.5]) {
                    img[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    if scene.daytime == Daytime::Night {
        for p in &mut img {
            *p *= NIGHT_FACTOR;
        }
    }
    let (contrast_loss, noise) = scene.condition.camera_degradation();
    if contrast_loss > 0.0 || noise > 0.0 {
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0xCA3E_5A17);
        for p in &mut img {
            let n: f64 = rng.sample(StandardNormal);
            *p = mean + (*p - mean) * (1.0 - contrast_loss) + noise * n;
        }
    }
    let data = img.into_iter().map(|p| T::of(p.clamp(0.0, 1.0))).collect();
    CameraFrame {
        pixels: Tensor::from_vec(&[h, w, 3], data).unwrap(),
        intrinsics: cam.intrinsics.cast(),
        extrinsics: cam.extrinsics.cast(),
    }
}

/// Exponential noise floor plus one Gaussian blob per object, centred on its
/// (range, azimuth, elevation) bin position with a Doppler peak at its radial
/// velocity. Blob extent follows the object's footprint.
pub fn render_radar<T: Scalar>(scene: &Scene, rig: &SensorRig) -> RadarCube<T> {
    let spec = &rig.radar;
    let axes = spec.axes();
    let [nr, na, ne, nd] = [axes[0].len(), axes[1].len(), axes[2].len(), axes[3].len()];
    let mut power = vec![0f64; nr * na * ne * nd];
    let floor = spec.noise_floor * scene.condition.radar_noise_gain();
    if floor > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x4ADA_12C0);
        for p in &mut power {
            let e: f64 = Exp1.sample(&mut rng);
            *p = floor * e;
        }
    }
    let (dr, da, de) = (
        spec.range_resolution(),
        spec.azimuth_resolution(),
        spec.elevation_resolution(),
    );
    let dop0 = axes[3][0];
    for obj in &scene.objects {
        let b = &obj.bbox;
        let pol = Polar::from_cartesian(b.center);
        let rel = b.heading - pol.azimuth;
        let (l, w, h) = (b.size[0], b.size[1], b.size[2]);
        let radial_extent = (l * rel.cos()).abs() + (w * rel.sin()).abs();
        let cross_extent = (l * rel.sin()).abs() + (w * rel.cos()).abs();
        let r = pol.range.max(1.0);
        let sigma = [
            (0.3 * radial_extent / dr).max(0.7),
            (0.3 * cross_extent / (r * da)).max(0.7),
            (0.3 * h / (r * de)).max(0.7),
            0.6,
        ];
        // continuous bin coordinates (bin centres at integers)
        let pos = [
            pol.range / dr - 0.5,
            (pol.azimuth + spec.fov_azimuth) / da - 0.5,
            (pol.elevation + spec.fov_elevation) / de - 0.5,
            (obj.radial_velocity - dop0) / spec.doppler_resolution,
        ];
        let profile = |n: usize, axis: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let z = (i as f64 - pos[axis]) / sigma[axis];
                    (-0.5 * z * z).exp()
                })
                .collect()
        };
        let (pr, pa, pe, pd) = (profile(nr, 0), profile(na, 1), profile(ne, 2), profile(nd, 3));
        for (ri, &wr) in pr.iter().enumerate() {
            if wr < 1e-6 {
                continue;
            }
            for (ai, &wa) in pa.iter().enumerate() {
                let wra = wr * wa;
                if wra < 1e-6 {
                    continue;
                }
                for (ei, &we) in pe.iter().enumerate() {
                    let base = ((ri * na + ai) * ne + ei) * nd;
                    for (di, &wd) in pd.iter().enumerate() {
                        power[base + di] += wra * we * wd;
                    }
                }
            }
        }
    }
    let axes_t = axes.map(|a| a.into_iter().map(T::of).collect());
    RadarCube::new(
        Tensor::from_vec(&[nr, na, ne, nd], power.into_iter().map(T::of).collect()).unwrap(),
        axes_t,
    )
    .expect("rendered cube satisfies cube invariants")
}
