//! The full detector: per-stream backbones, a shared fusion block applied
//! once plus once per refinement cycle, and the detection head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{EncoderConfig, Source, StreamBackbone};
use crate::camera::{resize_image, CameraFrame, CameraModel, Intrinsics};
use crate::detection::{decode_boxes, DetectionHead, HeadConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    init_queries, positional_encoding, query_encoding, to_tokens, AttentionConfig, FieldOfView, FusionBlock,
    Projector, QueryGrid, QuerySet, RadarGrid, RadarPlane, SensorContext,
};
use crate::geometry::{Box3D, Polar};
use crate::nn::{Builder, ParamStore, Session};
use crate::radar::{project_cube_with, trim_artifacts, ProjectionConfig, RadarCube, NUM_STATS};
use crate::scalar::Scalar;
use crate::synthetic::SensorRig;
use crate::tensor::Tensor;

/// Which input streams a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Modalities {
    pub camera: bool,
    pub radar_ra: bool,
    pub radar_ae: bool,
}

impl Modalities {
    pub const FUSION: Modalities = Modalities {
        camera: true,
        radar_ra: true,
        radar_ae: true,
    };

    pub const ALL_SUBSETS: [&'static str; 7] = ["C", "R_AE", "R_RA", "R", "C+R_AE", "C+R_RA", "C+R"];

    pub fn sources(&self) -> Vec<Source> {
        let mut v = Vec::new();
        if self.camera {
            v.push(Source::Camera);
        }
        if self.radar_ra {
            v.push(Source::RadarRa);
        }
        if self.radar_ae {
            v.push(Source::RadarAe);
        }
        v
    }

    pub fn has_radar(&self) -> bool {
        self.radar_ra || self.radar_ae
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let radar = match (self.radar_ra, self.radar_ae) {
            (true, true) => Some("R"),
            (true, false) => Some("R_RA"),
            (false, true) => Some("R_AE"),
            (false, false) => None,
        };
        match (self.camera, radar) {
            (true, Some(r)) => write!(f, "C+{r}"),
            (true, None) => f.write_str("C"),
            (false, Some(r)) => f.write_str(r),
            (false, None) => f.write_str("none"),
        }
    }
}

impl FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modalities {
            camera: false,
            radar_ra: false,
            radar_ae: false,
        };
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_uppercase().as_str() {
                "C" => m.camera = true,
                "R" => {
                    m.radar_ra = true;
                    m.radar_ae = true;
                }
                "R_RA" => m.radar_ra = true,
                "R_AE" => m.radar_ae = true,
                _ => return Err(Error::Invalid(format!("unknown modality '{part}' in '{s}'"))),
            }
        }
        Ok(m)
    }
}

impl TryFrom<String> for Modalities {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Modalities> for String {
    fn from(m: Modalities) -> String {
        m.to_string()
    }
}

/// Fixed affine input normalisation, `(x - shift) * scale` per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputNorm {
    pub camera_shift: f64,
    pub camera_scale: f64,
    pub radar_shift: [f64; NUM_STATS],
    pub radar_scale: [f64; NUM_STATS],
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            camera_shift: 0.42,
            camera_scale: 5.0,
            radar_shift: [0.08, 0.0085, 0.0004, 2.8, -0.5, 4.8],
            radar_scale: [8.0, 400.0, 200.0, 1.5, 1.0, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub modalities: Modalities,
    pub attention: AttentionConfig,
    pub queries: QueryGrid,
    pub query_seed: u64,
    pub cycles: usize,
    pub num_classes: usize,
    pub camera_encoder: EncoderConfig,
    pub radar_encoder: EncoderConfig,
    /// Average-pool factor applied to the raw-input skip before its lateral.
    pub skip_pool: usize,
    pub image_height: usize,
    pub trim_margin: usize,
    pub projection: ProjectionConfig,
    pub head: HeadConfig,
    pub norm: InputNorm,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: Modalities::FUSION,
            attention: AttentionConfig::default(),
            queries: QueryGrid::default(),
            query_seed: 0,
            cycles: 3,
            num_classes: 2,
            camera_encoder: EncoderConfig::camera(),
            radar_encoder: EncoderConfig::radar(),
            skip_pool: 1,
            image_height: 64,
            trim_margin: crate::radar::DEFAULT_TRIM_MARGIN,
            projection: ProjectionConfig::default(),
            head: HeadConfig::default(),
            norm: InputNorm::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.modalities.sources().is_empty() {
            return Err(Error::Invalid("model needs at least one modality".into()));
        }
        if self.queries.count() == 0 {
            return Err(Error::Invalid("query grid is empty".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Invalid("num_classes must be positive".into()));
        }
        if self.image_height < 16 {
            return Err(Error::Invalid("image_height must be at least 16".into()));
        }
        if !(self.head.class_prior > 0.0 && self.head.class_prior < 1.0) {
            return Err(Error::Invalid("class_prior must lie in (0, 1)".into()));
        }
        if self.attention.levels != 4 {
            return Err(Error::Invalid("the pyramid has exactly 4 levels".into()));
        }
        Ok(())
    }
}

/// Geometry every forward pass needs: the resized camera, radar plane grids
/// and the query field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    pub camera: CameraModel<f64>,
    pub ra: RadarGrid,
    pub ae: RadarGrid,
    pub fov: FieldOfView,
}

impl SensorLayout {
    pub fn new(rig: &SensorRig, cfg: &ModelConfig) -> Result<Self> {
        rig.validate()?;
        let r = &rig.radar;
        if r.range_bins <= 2 * cfg.trim_margin {
            return Err(Error::AxisTooShort {
                len: r.range_bins,
                margin: cfg.trim_margin,
            });
        }
        let c = &rig.camera;
        let th = cfg.image_height;
        let tw = ((c.width as f64) * th as f64 / c.height as f64).round().max(1.0) as usize;
        let (kx, ky) = (tw as f64 / c.width as f64, th as f64 / c.height as f64);
        let k = c.intrinsics;
        let camera = CameraModel {
            intrinsics: Intrinsics {
                fx: k.fx * kx,
                fy: k.fy * ky,
                cx: k.cx * kx,
                cy: k.cy * ky,
            },
            extrinsics: c.extrinsics,
            width: tw,
            height: th,
        };
        let dr = r.range_resolution();
        let m = cfg.trim_margin;
        Ok(Self {
            camera,
            ra: RadarGrid {
                plane: RadarPlane::RangeAzimuth,
                rows: r.range_bins - 2 * m,
                cols: r.azimuth_bins,
                row_bounds: (m as f64 * dr, (r.range_bins - m) as f64 * dr),
                col_bounds: (-r.fov_azimuth, r.fov_azimuth),
            },
            ae: RadarGrid {
                plane: RadarPlane::AzimuthElevation,
                rows: r.azimuth_bins,
                cols: r.elevation_bins,
                row_bounds: (-r.fov_azimuth, r.fov_azimuth),
                col_bounds: (-r.fov_elevation, r.fov_elevation),
            },
            fov: FieldOfView {
                range_max: r.range_max,
                azimuth: r.fov_azimuth,
                elevation: r.fov_elevation,
            },
        })
    }
}

/// Normalised channel-first network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    /// `[3, H, W]`.
    pub camera: Tensor<T>,
    /// `[6, range, azimuth]`.
    pub ra: Tensor<T>,
    /// `[6, azimuth, elevation]`.
    pub ae: Tensor<T>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn get(&self, source: Source) -> &Tensor<T> {
        match source {
            Source::Camera => &self.camera,
            Source::RadarRa => &self.ra,
            Source::RadarAe => &self.ae,
        }
    }
}

fn normalise_channels<T: Scalar>(mut t: Tensor<T>, shift: &[f64], scale: &[f64]) -> Tensor<T> {
    let per = t.len() / shift.len();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let c = i / per;
        *v = (*v - T::of(shift[c])) * T::of(scale[c]);
    }
    t
}

/// Trim, project and resize raw sensor data into network inputs.
pub fn prepare_input<T: Scalar>(
    cube: &RadarCube<f32>,
    image: &CameraFrame<f32>,
    cfg: &ModelConfig,
) -> Result<ModelInput<T>> {
    let trimmed = trim_artifacts(cube, cfg.trim_margin)?;
    let proj = project_cube_with(&trimmed, &cfg.projection);
    let resized = resize_image(image, cfg.image_height)?;
    let n = &cfg.norm;
    Ok(ModelInput {
        camera: normalise_channels(resized.to_chw().cast(), &[n.camera_shift; 3], &[n.camera_scale; 3]),
        ra: normalise_channels(proj.ra.to_chw().cast(), &n.radar_shift, &n.radar_scale),
        ae: normalise_channels(proj.ae.to_chw().cast(), &n.radar_shift, &n.radar_scale),
    })
}

/// Predictions of one head pass.
#[derive(Debug, Clone)]
pub struct CycleOutput<T> {
    /// `[N, 8 + C]` raw head output on the session tape.
    pub raw: Var,
    /// Query positions the pass was anchored at.
    pub positions: Vec<Polar<T>>,
    pub boxes: Vec<Box3D<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: SensorLayout,
    pub rig: SensorRig,
    pub params: ParamStore<T>,
    pub streams: Vec<StreamBackbone>,
    pub fusion: FusionBlock,
    pub head: DetectionHead,
    pub queries: QuerySet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, rig: &SensorRig) -> Result<Self> {
        config.validate()?;
        let layout = SensorLayout::new(rig, config)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let sources = config.modalities.sources();
        let dim = config.attention.dim;
        let (streams, fusion, head) = {
            let mut b = Builder::new(&mut params, &mut rng);
            let streams = sources
                .iter()
                .map(|&src| {
                    let (ch, enc) = match src {
                        Source::Camera => (3, &config.camera_encoder),
                        _ => (NUM_STATS, &config.radar_encoder),
                    };
                    StreamBackbone::new(&mut b, src, ch, enc, dim, config.skip_pool)
                })
                .collect();
            let fusion = FusionBlock::new(&mut b, &sources, &config.attention);
            let head = DetectionHead::new(&mut b, dim, config.num_classes, &config.head);
            (streams, fusion, head)
        };
        let queries = init_queries(config.queries, dim, &layout.fov, config.query_seed);
        Ok(Self {
            config: config.clone(),
            layout,
            rig: rig.clone(),
            params,
            streams,
            fusion,
            head,
            queries,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn projector(&self, source: Source) -> Projector<T> {
        match source {
            Source::Camera => Projector::Camera(self.layout.camera.cast()),
            Source::RadarRa => Projector::Radar(self.layout.ra),
            Source::RadarAe => Projector::Radar(self.layout.ae),
        }
    }

    /// Backbones, positional encoding and value projections for every stream.
    pub fn sensor_contexts(&self, s: &mut Session<'_, T>, input: &ModelInput<T>) -> Result<Vec<SensorContext<T>>> {
        let dim = self.config.attention.dim;
        self.streams
            .iter()
            .zip(&self.fusion.branches)
            .map(|(stream, branch)| {
                let x = s.constant(input.get(stream.source).clone());
                let pyramid = stream.forward(s, x)?;
                let mut tokens = Vec::with_capacity(pyramid.levels.len());
                for (&level, &(h, w)) in pyramid.levels.iter().zip(&pyramid.dims) {
                    let pe = s.constant(positional_encoding(h, w, dim));
                    let encoded = s.tape.add(level, pe);
                    tokens.push(to_tokens(s, encoded));
                }
                Ok(SensorContext {
                    source: stream.source,
                    values: branch.attn.project_values(s, &tokens),
                    dims: pyramid.dims,
                    projector: self.projector(stream.source),
                })
            })
            .collect()
    }

    /// Initial fusion pass plus `cycles` refinement passes; every pass is
    /// returned (the last one holds the final predictions).
    pub fn forward(&self, s: &mut Session<'_, T>, input: &ModelInput<T>) -> Result<Vec<CycleOutput<T>>> {
        let contexts = self.sensor_contexts(s, input)?;
        let dim = self.config.attention.dim;
        let mut x = s.constant(self.queries.features.clone());
        let mut positions = self.queries.positions.clone();
        let mut outputs = Vec::with_capacity(self.config.cycles + 1);
        for _ in 0..=self.config.cycles {
            let pos = s.constant(query_encoding(&positions, dim, &self.layout.fov));
            let trace = self.fusion.forward(s, x, pos, &positions, &contexts)?;
            x = trace.fused;
            let raw = self.head.forward(s, x);
            let boxes = decode_boxes(s.value(raw), &positions);
            let next = boxes
                .iter()
                .map(|b| self.layout.fov.clamp(Polar::from_cartesian(b.center)))
                .collect();
            outputs.push(CycleOutput {
                raw,
                positions: std::mem::replace(&mut positions, next),
                boxes,
            });
        }
        Ok(outputs)
    }

    /// Final-cycle boxes for one frame.
    pub fn infer(&self, input: &ModelInput<T>) -> Result<Vec<Box3D<T>>> {
        let mut s = Session::inference(&self.params);
        let mut out = self.forward(&mut s, input)?;
        Ok(out.pop().expect("at least one pass").boxes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_scene, render_camera, render_radar, SceneConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            queries: QueryGrid {
                range_bins: 4,
                azimuth_bins: 4,
            },
            cycles: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn modality_names_round_trip() {
        for s in Modalities::ALL_SUBSETS {
            let m: Modalities = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("X".parse::<Modalities>().is_err());
        let json = serde_json::to_string(&Modalities::FUSION).unwrap();
        assert_eq!(json, "\"C+R\"");
    }

    #[test]
    fn layout_of_default_rig() {
        let l = SensorLayout::new(&SensorRig::default(), &ModelConfig::default()).unwrap();
        assert_eq!((l.camera.height, l.camera.width), (64, 128));
        assert_eq!((l.ra.rows, l.ra.cols), (58, 32));
        assert_eq!((l.ae.rows, l.ae.cols), (32, 16));
        assert!((l.ra.row_bounds.0 - 3.375).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_finite_output() {
        let rig = SensorRig::default();
        let scene = generate_scene(3, &SceneConfig::default(), &rig).unwrap();
        let cfg = small_config();
        let input = prepare_input::<f32>(
            &render_radar(&scene, &rig),
            &render_camera(&scene, &rig, &SceneConfig::default().classes),
            &cfg,
        )
        .unwrap();
        let model = Model::<f32>::new(&cfg, &rig).unwrap();
        let mut s = Session::inference(&model.params);
        let out = model.forward(&mut s, &input).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(s.value(out[0].raw).shape(), &[16, 10]);
        for c in &out {
            assert!(c.boxes.iter().all(|b| b.center.iter().all(|v| v.is_finite())));
        }
        // the second pass is anchored where the first one decoded
        for (b, p) in out[0].boxes.iter().zip(&out[1].positions) {
            assert!(model.layout.fov.contains(*p));
            let q = Polar::from_cartesian(b.center);
            if model.layout.fov.contains(q) {
                assert!((q.range - p.range).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn parameter_count_ignores_query_count() {
        let rig = SensorRig::default();
        let counts: Vec<usize> = [100, 400, 900]
            .iter()
            .map(|&n| {
                let cfg = ModelConfig {
                    queries: QueryGrid::square(n).unwrap(),
                    ..ModelConfig::default()
                };
                Model::<f32>::new(&cfg, &rig).unwrap().parameter_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn subsets_build_matching_branches() {
        let rig = SensorRig::default();
        for name in Modalities::ALL_SUBSETS {
            let cfg = ModelConfig {
                modalities: name.parse().unwrap(),
                ..small_config()
            };
            let m = Model::<f32>::new(&cfg, &rig).unwrap();
            assert_eq!(m.fusion.branches.len(), cfg.modalities.sources().len());
        }
    }
}
