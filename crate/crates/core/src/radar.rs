//! 4D radar cube handling: artifact trimming and the dual projection onto the
//! range-azimuth (RA) and azimuth-elevation (AE) planes.
//!
//! Each projected cell carries six statistics, in this channel order:
//! `[amp_max, amp_median, amp_var, dop_max, dop_median, dop_var]`.
//! Amplitude statistics run over every power value that collapses onto the
//! cell. Doppler statistics run over per-bin velocities: for each cell of the
//! remaining spatial axis the velocity of the strongest Doppler bin is taken
//! (ties go to the lowest bin index).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const NUM_STATS: usize = 6;
pub const DEFAULT_TRIM_MARGIN: usize = 3;

/// Cube axes in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubeAxis {
    Range,
    Azimuth,
    Elevation,
    Doppler,
}

impl CubeAxis {
    pub fn index(self) -> usize {
        match self {
            CubeAxis::Range => 0,
            CubeAxis::Azimuth => 1,
            CubeAxis::Elevation => 2,
            CubeAxis::Doppler => 3,
        }
    }
}

/// Dense power grid over `(range, azimuth, elevation, doppler)` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarCube<T> {
    power: Tensor<T>,
    /// Bin centres: meters, radians, radians, meters/second.
    axes: [Vec<T>; 4],
}

fn strictly_increasing<T: Scalar>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

impl<T: Scalar> RadarCube<T> {
    pub fn new(power: Tensor<T>, axes: [Vec<T>; 4]) -> Result<Self> {
        if power.shape().len() != 4 {
            return Err(Error::Shape(format!("radar cube must be 4D, got {:?}", power.shape())));
        }
        for (i, axis) in axes.iter().enumerate() {
            if axis.len() != power.dim(i) {
                return Err(Error::Shape(format!(
                    "axis {i} has {} coordinates for {} bins",
                    axis.len(),
                    power.dim(i)
                )));
            }
            if !strictly_increasing(axis) {
                return Err(Error::Invalid(format!("axis {i} is not strictly increasing")));
            }
        }
        if power.data().iter().any(|&p| !(p.is_finite() && p >= T::zero())) {
            return Err(Error::Invalid("cube power must be finite and non-negative".into()));
        }
        Ok(Self { power, axes })
    }

    /// All-zero cube over the given axes.
    pub fn zeros(axes: [Vec<T>; 4]) -> Result<Self> {
        let dims: Vec<usize> = axes.iter().map(Vec::len).collect();
        Self::new(Tensor::zeros(&dims), axes)
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.power.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn power(&self) -> &Tensor<T> {
        &self.power
    }

    pub fn axis(&self, axis: CubeAxis) -> &[T] {
        &self.axes[axis.index()]
    }

    pub fn range_axis(&self) -> &[T] {
        &self.axes[0]
    }

    pub fn azimuth_axis(&self) -> &[T] {
        &self.axes[1]
    }

    pub fn elevation_axis(&self) -> &[T] {
        &self.axes[2]
    }

    pub fn doppler_axis(&self) -> &[T] {
        &self.axes[3]
    }

    #[inline]
    pub fn at(&self, r: usize, a: usize, e: usize, d: usize) -> T {
        let [_, na, ne, nd] = self.dims();
        self.power.data()[((r * na + a) * ne + e) * nd + d]
    }

    /// Same axes, every power value zero.
    pub fn zeroed(&self) -> Self {
        Self {
            power: Tensor::zeros(self.power.shape()),
            axes: self.axes.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RadarCube<U> {
        RadarCube {
            power: self.power.cast(),
            axes: self.axes.clone().map(|a| a.into_iter().map(cast).collect()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CUBE_MAGIC)?;
        w.write_u32::<LittleEndian>(CUBE_VERSION)?;
        for d in self.dims() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &p in self.power.data() {
            w.write_f32::<LittleEndian>(cast(p))?;
        }
        for axis in &self.axes {
            for &c in axis {
                w.write_f32::<LittleEndian>(cast(c))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let fmt = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CUBE_MAGIC {
            return Err(fmt("not a radar cube file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CUBE_VERSION {
            return Err(fmt(&format!("unsupported cube version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let n: usize = dims.iter().product();
        let mut read_vec = |len: usize| -> Result<Vec<T>> {
            let mut buf = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut buf)
                .map_err(|_| fmt("truncated cube file"))?;
            Ok(buf.into_iter().map(cast).collect())
        };
        let data = read_vec(n)?;
        let axes = [read_vec(dims[0])?, read_vec(dims[1])?, read_vec(dims[2])?, read_vec(dims[3])?];
        Self::new(Tensor::from_vec(&dims, data)?, axes)
    }
}

/// File layout (all little-endian):
///
/// ```text
/// magic  b"RCUB"
/// u32    format version (1)
/// u32 x4 dims: range, azimuth, elevation, doppler
/// f32[]  power, row-major over (range, azimuth, elevation, doppler)
/// f32[]  range axis, azimuth axis, elevation axis, doppler axis
/// ```
pub const CUBE_MAGIC: &[u8; 4] = b"RCUB";
pub const CUBE_VERSION: u32 = 1;

/// Remove `margin` bins from both ends of the range axis.
pub fn trim_artifacts<T: Scalar>(cube: &RadarCube<T>, margin: usize) -> Result<RadarCube<T>> {
    trim_axis(cube, CubeAxis::Range, margin)
}

/// Remove `margin` bins from both ends of `axis`.
pub fn trim_axis<T: Scalar>(cube: &RadarCube<T>, axis: CubeAxis, margin: usize) -> Result<RadarCube<T>> {
    let dims = cube.dims();
    let ax = axis.index();
    let len = dims[ax];
    if len <= 2 * margin {
        return Err(Error::AxisTooShort { len, margin });
    }
    if margin == 0 {
        return Ok(cube.clone());
    }
    let mut new_dims = dims;
    new_dims[ax] = len - 2 * margin;
    let mut data = Vec::with_capacity(new_dims.iter().product());
    let src = cube.power.data();
    for r in 0..dims[0] {
        for a in 0..dims[1] {
            for e in 0..dims[2] {
                for d in 0..dims[3] {
                    let idx = [r, a, e, d][ax];
                    if idx < margin || idx >= len - margin {
                        continue;
                    }
                    data.push(src[((r * dims[1] + a) * dims[2] + e) * dims[3] + d]);
                }
            }
        }
    }
    let mut axes = cube.axes.clone();
    axes[ax] = axes[ax][margin..len - margin].to_vec();
    Ok(RadarCube {
        power: Tensor::from_vec(&new_dims, data)?,
        axes,
    })
}

/// Maximum, median and population variance of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats<T> {
    pub max: T,
    pub median: T,
    pub variance: T,
}

/// Median of the values; reorders `values` in place.
fn median_in_place<T: Scalar>(values: &mut [T]) -> T {
    let n = values.len();
    let cmp = |a: &T, b: &T| a.partial_cmp(b).expect("finite values");
    let (_, &mut hi, _) = values.select_nth_unstable_by(n / 2, cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..n / 2].iter().copied().fold(T::neg_infinity(), T::max);
        (lo + hi) / T::of(2.0)
    }
}

fn stats_in_place<T: Scalar>(values: &mut [T]) -> Stats<T> {
    let n = T::of(values.len() as f64);
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    let mean = values.iter().copied().sum::<T>() / n;
    let variance = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let median = median_in_place(values);
    Stats { max, median, variance }
}

/// `(max, median, variance)` with an even-length median averaging the two
/// middle values and the variance divided by `n`.
pub fn reduce_stats<T: Scalar>(values: &[T]) -> Result<Stats<T>> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("statistics need finite values".into()));
    }
    Ok(stats_in_place(&mut values.to_vec()))
}

/// A 2D map with `NUM_STATS` channels, stored `[rows, cols, NUM_STATS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatMap<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> StatMap<T> {
    pub fn rows(&self) -> usize {
        self.data.dim(0)
    }

    pub fn cols(&self) -> usize {
        self.data.dim(1)
    }

    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let off = (row * self.cols() + col) * NUM_STATS;
        &self.data.data()[off..off + NUM_STATS]
    }

    /// Channel-first `[NUM_STATS, rows, cols]` copy for convolutional input.
    pub fn to_chw(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); NUM_STATS * r * c];
        for (i, cell) in self.data.data().chunks(NUM_STATS).enumerate() {
            for (ch, &v) in cell.iter().enumerate() {
                out[ch * r * c + i] = v;
            }
        }
        Tensor::from_vec(&[NUM_STATS, r, c], out).unwrap()
    }
}

/// RA map rows = range bins, cols = azimuth bins; AE map rows = azimuth
/// bins, cols = elevation bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DualProjection<T> {
    pub ra: StatMap<T>,
    pub ae: StatMap<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProjectionConfig {
    /// Convert amplitudes to decibels before computing statistics.
    #[serde(default)]
    pub log_amplitude: bool,
}

fn amplitude<T: Scalar>(p: T, cfg: &ProjectionConfig) -> T {
    if cfg.log_amplitude {
        T::of(10.0) * (p + T::of(1e-6)).log10()
    } else {
        p
    }
}

/// Project a (trimmed) cube onto the RA and AE planes.
pub fn project_cube<T: Scalar>(cube: &RadarCube<T>) -> DualProjection<T> {
    project_cube_with(cube, &ProjectionConfig::default())
}

pub fn project_cube_with<T: Scalar>(cube: &RadarCube<T>, cfg: &ProjectionConfig) -> DualProjection<T> {
    let [nr, na, ne, nd] = cube.dims();
    let p = cube.power.data();
    let dop = cube.doppler_axis();

    // Velocity of the strongest Doppler bin for every spatial cell.
    let mut peak_velocity = vec![T::zero(); nr * na * ne];
    for (cell, v) in peak_velocity.iter_mut().enumerate() {
        let row = &p[cell * nd..(cell + 1) * nd];
        let mut best = 0;
        for (d, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = d;
            }
        }
        *v = dop[best];
    }

    let write = |out: &mut Vec<T>, amp: Stats<T>, vel: Stats<T>| {
        out.extend([amp.max, amp.median, amp.variance, vel.max, vel.median, vel.variance]);
    };

    let mut ra = Vec::with_capacity(nr * na * NUM_STATS);
    let mut amp_buf = Vec::with_capacity(ne * nd);
    let mut vel_buf = Vec::with_capacity(ne.max(nr));
    for r in 0..nr {
        for a in 0..na {
            amp_buf.clear();
            vel_buf.clear();
            let base = (r * na + a) * ne;
            amp_buf.extend(p[base * nd..(base + ne) * nd].iter().map(|&x| amplitude(x, cfg)));
            vel_buf.extend_from_slice(&peak_velocity[base..base + ne]);
            write(&mut ra, stats_in_place(&mut amp_buf), stats_in_place(&mut vel_buf));
        }
    }

    let mut ae = Vec::with_capacity(na * ne * NUM_STATS);
    for a in 0..na {
        for e in 0..ne {
            amp_buf.clear();
            vel_buf.clear();
            for r in 0..nr {
                let cell = (r * na + a) * ne + e;
                amp_buf.extend(p[cell * nd..(cell + 1) * nd].iter().map(|&x| amplitude(x, cfg)));
                vel_buf.push(peak_velocity[cell]);
            }
            write(&mut ae, stats_in_place(&mut amp_buf), stats_in_place(&mut vel_buf));
        }
    }

    DualProjection {
        ra: StatMap {
            data: Tensor::from_vec(&[nr, na, NUM_STATS], ra).unwrap(),
        },
        ae: StatMap {
            data: Tensor::from_vec(&[na, ne, NUM_STATS], ae).unwrap(),
        },
    }
}
