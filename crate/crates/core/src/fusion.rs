//! Query-based sensor fusion.
//!
//! Queries are polar reference points with feature vectors. Each fusion block
//! runs self-attention over the queries, projects every reference point onto
//! each sensor's map, gathers features there with multi-level deformable
//! attention, passes each sensor branch through its own feed-forward layer
//! and finally takes the element-wise maximum over the sensors that see the
//! query.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DeformSpec, Var};
use crate::backbone::Source;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geometry::Polar;
use crate::nn::{Builder, LayerNorm, Linear, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Symmetric sensor field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOfView {
    pub range_max: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl FieldOfView {
    /// Clamp into `(0, range_max] x [-az, az] x [-el, el]`.
    pub fn clamp<T: Scalar>(&self, p: Polar<T>) -> Polar<T> {
        let (rmax, az, el) = (T::of(self.range_max), T::of(self.azimuth), T::of(self.elevation));
        let rmin = T::of(self.range_max * 1e-3);
        Polar::new(
            p.range.max(rmin).min(rmax),
            p.azimuth.max(-az).min(az),
            p.elevation.max(-el).min(el),
        )
    }

    pub fn contains<T: Scalar>(&self, p: Polar<T>) -> bool {
        let f = |v: T| v.f64();
        f(p.range) > 0.0
            && f(p.range) <= self.range_max
            && f(p.azimuth).abs() <= self.azimuth
            && f(p.elevation).abs() <= self.elevation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryGrid {
    pub range_bins: usize,
    pub azimuth_bins: usize,
}

impl QueryGrid {
    pub fn count(&self) -> usize {
        self.range_bins * self.azimuth_bins
    }

    /// Square grid with `n` cells; `n` must be a perfect square.
    pub fn square(n: usize) -> Result<Self> {
        let side = (n as f64).sqrt().round() as usize;
        if side == 0 || side * side != n {
            return Err(Error::Invalid(format!("query count {n} is not a perfect square")));
        }
        Ok(Self {
            range_bins: side,
            azimuth_bins: side,
        })
    }
}

impl Default for QueryGrid {
    fn default() -> Self {
        Self {
            range_bins: 20,
            azimuth_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<T> {
    pub positions: Vec<Polar<T>>,
    /// `[N, D]`.
    pub features: Tensor<T>,
}

impl<T: Scalar> QuerySet<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Cell-centre grid over range x azimuth at zero elevation, range-major,
/// with features drawn uniformly from `[0, 1)`.
pub fn init_queries<T: Scalar>(grid: QueryGrid, dim: usize, fov: &FieldOfView, seed: u64) -> QuerySet<T> {
    let mut positions = Vec::with_capacity(grid.count());
    for i in 0..grid.range_bins {
        let r = (i as f64 + 0.5) / grid.range_bins as f64 * fov.range_max;
        for j in 0..grid.azimuth_bins {
            let az = -fov.azimuth + (j as f64 + 0.5) / grid.azimuth_bins as f64 * 2.0 * fov.azimuth;
            positions.push(Polar::new(T::of(r), T::of(az), T::zero()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.count() * dim;
    let features = (0..n).map(|_| T::of(rng.random::<f64>())).collect();
    QuerySet {
        positions,
        features: Tensor::from_vec(&[grid.count(), dim], features).unwrap(),
    }
}

/// A continuous map location. `row`/`col` are `v`/`u` for the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionResult<T> {
    pub row: T,
    pub col: T,
    pub valid: bool,
}

impl<T: Scalar> ProjectionResult<T> {
    fn invalid() -> Self {
        Self {
            row: T::zero(),
            col: T::zero(),
            valid: false,
        }
    }
}

/// Pinhole projection of a polar ego point; invalid behind the camera or
/// outside the image.
pub fn project_to_camera<T: Scalar>(point: Polar<T>, camera: &CameraModel<T>) -> ProjectionResult<T> {
    match camera.project(point.to_cartesian()) {
        Some((u, v)) if camera.in_image(u, v) => ProjectionResult {
            row: v,
            col: u,
            valid: true,
        },
        _ => ProjectionResult::invalid(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadarPlane {
    /// Rows = range, cols = azimuth.
    RangeAzimuth,
    /// Rows = azimuth, cols = elevation.
    AzimuthElevation,
}

/// Bin layout of a radar plane: bin counts plus the physical bounds that map
/// onto the outer bin edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarGrid {
    pub plane: RadarPlane,
    pub rows: usize,
    pub cols: usize,
    pub row_bounds: (f64, f64),
    pub col_bounds: (f64, f64),
}

/// `row = (a - lo) / (hi - lo) * rows - 0.5`, so bin centres land on integers;
/// invalid outside `[lo, hi]` on either axis.
pub fn project_to_radar_plane<T: Scalar>(point: Polar<T>, grid: &RadarGrid) -> ProjectionResult<T> {
    let (a, b) = match grid.plane {
        RadarPlane::RangeAzimuth => (point.range, point.azimuth),
        RadarPlane::AzimuthElevation => (point.azimuth, point.elevation),
    };
    let map = |v: T, (lo, hi): (f64, f64), n: usize| {
        let t = (v - T::of(lo)) / T::of(hi - lo);
        (t * T::of(n as f64) - T::of(0.5), t >= T::zero() && t <= T::one())
    };
    let (row, ok_r) = map(a, grid.row_bounds, grid.rows);
    let (col, ok_c) = map(b, grid.col_bounds, grid.cols);
    if ok_r && ok_c {
        ProjectionResult { row, col, valid: true }
    } else {
        ProjectionResult::invalid()
    }
}

/// Where a sensor's queries land.
#[derive(Debug, Clone, PartialEq)]
pub enum Projector<T> {
    Camera(CameraModel<T>),
    Radar(RadarGrid),
}

impl<T: Scalar> Projector<T> {
    pub fn project(&self, p: Polar<T>) -> ProjectionResult<T> {
        match self {
            Projector::Camera(cam) => project_to_camera(p, cam),
            Projector::Radar(grid) => project_to_radar_plane(p, grid),
        }
    }

    /// Map a projection to `(x, y)` in `[0, 1]` of the full input extent.
    pub fn normalize(&self, r: &ProjectionResult<T>) -> (T, T) {
        match self {
            Projector::Camera(cam) => (r.col / T::of(cam.width as f64), r.row / T::of(cam.height as f64)),
            Projector::Radar(g) => (
                (r.col + T::of(0.5)) / T::of(g.cols as f64),
                (r.row + T::of(0.5)) / T::of(g.rows as f64),
            ),
        }
    }
}

/// Fixed 2D sinusoidal encoding, `[channels, rows, cols]`.
///
/// The first half of the channels encodes the normalised row coordinate
/// `t = (i + 0.5) / rows`, the second half the column coordinate. Within a
/// half, channel `2k` is `sin(pi * 2^k * t)` and `2k + 1` is
/// `cos(pi * 2^k * t)`. `channels` must be a multiple of 4.
pub fn positional_encoding<T: Scalar>(rows: usize, cols: usize, channels: usize) -> Tensor<T> {
    assert_eq!(channels % 4, 0, "positional encoding needs channels divisible by 4");
    let quarter = channels / 4;
    let mut out = vec![T::zero(); channels * rows * cols];
    for i in 0..rows {
        let ty = (i as f64 + 0.5) / rows as f64;
        for j in 0..cols {
            let tx = (j as f64 + 0.5) / cols as f64;
            let pe = sinusoid_pair(ty, tx, quarter);
            for (c, v) in pe.into_iter().enumerate() {
                out[(c * rows + i) * cols + j] = T::of(v);
            }
        }
    }
    Tensor::from_vec(&[channels, rows, cols], out).unwrap()
}

fn sinusoid_pair(a: f64, b: f64, quarter: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(4 * quarter);
    for t in [a, b] {
        for k in 0..quarter {
            let w = std::f64::consts::PI * (1u64 << k) as f64;
            v.push((w * t).sin());
            v.push((w * t).cos());
        }
    }
    v
}

/// Add [`positional_encoding`] to a `[C, H, W]` map.
pub fn positional_encode<T: Scalar>(map: &Tensor<T>) -> Tensor<T> {
    let s = map.shape();
    let mut out = positional_encoding(s[1], s[2], s[0]);
    out.add_assign(map);
    out
}

/// Query encoding from normalised range and azimuth, `[N, dim]`.
pub fn query_encoding<T: Scalar>(positions: &[Polar<T>], dim: usize, fov: &FieldOfView) -> Tensor<T> {
    assert_eq!(dim % 4, 0);
    let mut data = Vec::with_capacity(positions.len() * dim);
    for p in positions {
        let tr = p.range.f64() / fov.range_max;
        let ta = (p.azimuth.f64() + fov.azimuth) / (2.0 * fov.azimuth);
        data.extend(sinusoid_pair(tr, ta, dim / 4).into_iter().map(T::of));
    }
    Tensor::from_vec(&[positions.len(), dim], data).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 4,
            levels: 4,
            points: 4,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Invalid("dim must be a multiple of 4 for positional encodings".into()));
        }
        if self.levels == 0 || self.points == 0 {
            return Err(Error::Invalid("levels and points must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Multi-head, multi-level deformable attention.
#[derive(Debug, Clone)]
pub struct DeformableAttention {
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub output: Linear,
    pub cfg: AttentionConfig,
}

/// Initial sampling pattern: head `h` looks along direction `2 pi h / H`,
/// point `k` sits `k + 1` level pixels out.
fn ring_offsets<T: Scalar>(cfg: &AttentionConfig) -> Vec<T> {
    let mut bias = Vec::with_capacity(cfg.heads * cfg.levels * cfg.points * 2);
    for h in 0..cfg.heads {
        let a = 2.0 * std::f64::consts::PI * h as f64 / cfg.heads as f64;
        let (s, c) = a.sin_cos();
        let m = s.abs().max(c.abs());
        for _ in 0..cfg.levels {
            for k in 0..cfg.points {
                bias.push(T::of(c / m * (k + 1) as f64));
                bias.push(T::of(s / m * (k + 1) as f64));
            }
        }
    }
    bias
}

impl DeformableAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: &AttentionConfig) -> Self {
        let hlk = cfg.heads * cfg.levels * cfg.points;
        b.scope("deform", |b| Self {
            value_proj: Linear::new(b, "value", cfg.dim, cfg.dim),
            offsets: Linear::with_bias(b, "offsets", cfg.dim, ring_offsets(cfg)),
            weights: Linear::with_bias(b, "weights", cfg.dim, vec![T::zero(); hlk]),
            output: Linear::new(b, "output", cfg.dim, cfg.dim),
            cfg: *cfg,
        })
    }

    /// Value projection of `[H_l * W_l, D]` level maps; reusable across cycles.
    pub fn project_values<T: Scalar>(&self, s: &mut Session<'_, T>, levels: &[Var]) -> Vec<Var> {
        levels.iter().map(|&l| self.value_proj.forward(s, l)).collect()
    }

    /// Sampling locations and attention weights predicted from `query`,
    /// as `([N, H, L, K, 2], [N, H, L, K])`.
    pub fn sampling<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        query: Var,
        refs: &[(T, T)],
        level_dims: &[(usize, usize)],
    ) -> (Var, Var) {
        let n = refs.len();
        let AttentionConfig {
            heads, levels, points, ..
        } = self.cfg;
        let mut base = Vec::with_capacity(n * heads * levels * points * 2);
        for &(x, y) in refs {
            for _ in 0..heads {
                for &(lh, lw) in level_dims {
                    let px = x * T::of(lw as f64) - T::of(0.5);
                    let py = y * T::of(lh as f64) - T::of(0.5);
                    for _ in 0..points {
                        base.push(px);
                        base.push(py);
                    }
                }
            }
        }
        let shape = [n, heads, levels, points, 2];
        let base = s.constant(Tensor::from_vec(&shape, base).unwrap());
        let off = self.offsets.forward(s, query);
        let off = s.tape.reshape(off, &shape);
        let loc = s.tape.add(off, base);
        let logits = self.weights.forward(s, query);
        let logits = s.tape.reshape(logits, &[n * heads, levels * points]);
        let attn = s.tape.softmax(logits);
        let attn = s.tape.reshape(attn, &[n, heads, levels, points]);
        (loc, attn)
    }

    /// `query: [N, D]` (features plus query encoding), `values`: projected
    /// levels, `refs`: normalised reference points, `mask`: valid queries.
    /// Masked queries yield zero rows.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        query: Var,
        values: &[Var],
        level_dims: &[(usize, usize)],
        refs: &[(T, T)],
        mask: &[bool],
    ) -> Result<Var> {
        let n = refs.len();
        if values.len() != self.cfg.levels || level_dims.len() != self.cfg.levels {
            return Err(Error::Shape(format!(
                "expected {} levels, got {} maps / {} dims",
                self.cfg.levels,
                values.len(),
                level_dims.len()
            )));
        }
        if s.tape.shape(query) != [n, self.cfg.dim] || mask.len() != n {
            return Err(Error::Shape(format!(
                "query {:?}, {} refs, {} mask entries",
                s.tape.shape(query),
                n,
                mask.len()
            )));
        }
        for (&v, &(h, w)) in values.iter().zip(level_dims) {
            if s.tape.shape(v) != [h * w, self.cfg.dim] {
                return Err(Error::Shape(format!(
                    "level values {:?} do not match {h}x{w}",
                    s.tape.shape(v)
                )));
            }
        }
        let (loc, attn) = self.sampling(s, query, refs, level_dims);
        let spec = DeformSpec {
            level_dims: level_dims.to_vec(),
            heads: self.cfg.heads,
            points: self.cfg.points,
            mask: mask.to_vec(),
        };
        let sampled = s.tape.deform_sample(values, loc, attn, spec);
        let out = self.output.forward(s, sampled);
        Ok(if mask.iter().all(|&m| m) {
            out
        } else {
            let keep: Vec<T> = mask
                .iter()
                .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, self.cfg.dim))
                .collect();
            let keep = s.constant(Tensor::from_vec(&[n, self.cfg.dim], keep).unwrap());
            s.tape.mul(out, keep)
        })
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, dim: usize, heads: usize) -> Self {
        b.scope("self_attn", |b| Self {
            q: Linear::new(b, "q", dim, dim),
            k: Linear::new(b, "k", dim, dim),
            v: Linear::new(b, "v", dim, dim),
            o: Linear::new(b, "o", dim, dim),
            heads,
        })
    }

    /// Queries and keys read `x + pos`, values read `x`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, pos: Var) -> Var {
        let d = s.tape.shape(x)[1];
        let dh = d / self.heads;
        let xp = s.tape.add(x, pos);
        let q = self.q.forward(s, xp);
        let k = self.k.forward(s, xp);
        let v = self.v.forward(s, x);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.tape.slice_cols(q, h * dh, dh);
            let kh = s.tape.slice_cols(k, h * dh, dh);
            let vh = s.tape.slice_cols(v, h * dh, dh);
            let scores = s.tape.matmul_bt(qh, kh);
            let scores = s.tape.scale(scores, scale);
            let a = s.tape.softmax(scores);
            heads.push(s.tape.matmul(a, vh));
        }
        let cat = s.tape.concat_cols(&heads);
        self.o.forward(s, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, dim: usize, hidden: usize) -> Self {
        b.scope("ffn", |b| Self {
            fc1: Linear::new(b, "fc1", dim, hidden),
            fc2: Linear::new(b, "fc2", hidden, dim),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.tape.relu(h);
        self.fc2.forward(s, h)
    }
}

/// Cross-attention and feed-forward layers of one sensor.
#[derive(Debug, Clone)]
pub struct SensorBranch {
    pub source: Source,
    pub attn: DeformableAttention,
    pub norm_attn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl SensorBranch {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, source: Source, cfg: &AttentionConfig) -> Self {
        b.scope(source.name(), |b| Self {
            source,
            attn: DeformableAttention::new(b, cfg),
            norm_attn: LayerNorm::new(b, "norm_attn", cfg.dim),
            ffn: FeedForward::new(b, cfg.dim, cfg.dim * cfg.ffn_mult),
            norm_ffn: LayerNorm::new(b, "norm_ffn", cfg.dim),
        })
    }
}

/// Per-sensor inputs to a fusion block.
#[derive(Debug, Clone)]
pub struct SensorContext<T> {
    pub source: Source,
    /// Value-projected levels, `[H_l * W_l, D]`, coarse to fine.
    pub values: Vec<Var>,
    pub dims: Vec<(usize, usize)>,
    pub projector: Projector<T>,
}

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub self_attn: SelfAttention,
    pub norm_self: LayerNorm,
    pub branches: Vec<SensorBranch>,
    pub cfg: AttentionConfig,
}

/// Intermediate values of one block, kept for inspection and tests.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub after_self_attn: Var,
    pub branch_outputs: Vec<Var>,
    pub valid: Vec<Vec<bool>>,
    pub fused: Var,
}

impl FusionBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, sources: &[Source], cfg: &AttentionConfig) -> Self {
        b.scope("fusion", |b| Self {
            self_attn: SelfAttention::new(b, cfg.dim, cfg.heads),
            norm_self: LayerNorm::new(b, "norm_self", cfg.dim),
            branches: sources.iter().map(|&src| SensorBranch::new(b, src, cfg)).collect(),
            cfg: *cfg,
        })
    }

    /// One fusion step over `x: [N, D]` at `positions`, with `pos` the query
    /// encoding. `sensors` must follow the branch order.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        pos: Var,
        positions: &[Polar<T>],
        sensors: &[SensorContext<T>],
    ) -> Result<FusionTrace> {
        if sensors.len() != self.branches.len()
            || sensors.iter().zip(&self.branches).any(|(c, b)| c.source != b.source)
        {
            return Err(Error::Shape("sensor inputs do not match fusion branches".into()));
        }
        // 1. self-attention
        let sa = self.self_attn.forward(s, x, pos);
        let sa = s.dropout(sa);
        let x = s.tape.add(x, sa);
        let x = self.norm_self.forward(s, x);
        let query = s.tape.add(x, pos);

        let mut outputs = Vec::with_capacity(sensors.len());
        let mut valid = Vec::with_capacity(sensors.len());
        for (ctx, branch) in sensors.iter().zip(&self.branches) {
            // 2. reference points on this sensor
            let proj: Vec<_> = positions.iter().map(|&p| ctx.projector.project(p)).collect();
            let mask: Vec<bool> = proj.iter().map(|r| r.valid).collect();
            let refs: Vec<(T, T)> = proj.iter().map(|r| ctx.projector.normalize(r)).collect();
            // 3. deformable cross-attention
            let a = branch.attn.forward(s, query, &ctx.values, &ctx.dims, &refs, &mask)?;
            let a = s.dropout(a);
            let y = s.tape.add(x, a);
            let y = branch.norm_attn.forward(s, y);
            // 4. feed-forward
            let f = branch.ffn.forward(s, y);
            let f = s.dropout(f);
            let y2 = s.tape.add(y, f);
            outputs.push(branch.norm_ffn.forward(s, y2));
            valid.push(mask);
        }
        // 5. max over the sensors that see each query
        let fused = s.tape.masked_max(&outputs, &valid, x);
        Ok(FusionTrace {
            after_self_attn: x,
            branch_outputs: outputs,
            valid,
            fused,
        })
    }
}

/// Convert `[C, H, W]` to `[H * W, C]` on the tape.
pub fn to_tokens<T: Scalar>(s: &mut Session<'_, T>, map: Var) -> Var {
    let shape = s.tape.shape(map).to_vec();
    let flat = s.tape.reshape(map, &[shape[0], shape[1] * shape[2]]);
    s.tape.transpose(flat)
}
