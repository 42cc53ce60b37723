//! Per-stream feature extraction: a 1×1 channel adapter for radar maps, a
//! small residual convolutional encoder and a top-down feature pyramid neck.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Session};
use crate::scalar::Scalar;

/// Input streams feeding the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Camera,
    RadarRa,
    RadarAe,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Camera, Source::RadarRa, Source::RadarAe];

    pub fn name(self) -> &'static str {
        match self {
            Source::Camera => "camera",
            Source::RadarRa => "radar_ra",
            Source::RadarAe => "radar_ae",
        }
    }
}

/// 1×1 convolution from `in_channels` to `out_channels`.
#[derive(Debug, Clone)]
pub struct ChannelAdapter {
    pub conv: Conv2d,
}

impl ChannelAdapter {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            conv: Conv2d::new(b, "adapter", in_channels, out_channels, 1, 1),
        }
    }

    /// `map: [C_in, H, W] -> [C_out, H, W]`; errors on a channel mismatch.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, map: Var) -> Result<Var> {
        let got = s.tape.shape(map)[0];
        if got != self.conv.in_channels {
            return Err(Error::Channels {
                expected: self.conv.in_channels,
                got,
            });
        }
        Ok(self.conv.forward(s, map))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    /// Output width of the stride-4, stride-8 and stride-16 stages.
    pub stage_channels: [usize; 3],
    /// Residual blocks after each stage's downsampling convolution.
    pub blocks: [usize; 3],
}

impl EncoderConfig {
    pub fn camera() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [16, 24, 32],
            blocks: [1, 2, 2],
        }
    }

    pub fn radar() -> Self {
        Self {
            stem_channels: 8,
            stage_channels: [16, 24, 32],
            blocks: [1, 1, 1],
        }
    }
}

/// Smallest accepted encoder input side.
pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let h = self.conv1.forward(s, x);
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, h);
        let y = s.tape.add(x, h);
        s.tape.relu(y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    blocks: Vec<ResidualBlock>,
}

/// Stride-2 stem followed by three stride-2 stages (strides 4, 8, 16).
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stages: Vec<Stage>,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, in_channels: usize, config: &EncoderConfig) -> Self {
        b.scope("encoder", |b| {
            let stem = Conv2d::new(b, "stem", in_channels, config.stem_channels, 3, 2);
            let mut prev = config.stem_channels;
            let stages = (0..3)
                .map(|i| {
                    let ch = config.stage_channels[i];
                    let stage = b.scope(&format!("stage{i}"), |b| Stage {
                        down: Conv2d::new(b, "down", prev, ch, 3, 2),
                        blocks: (0..config.blocks[i])
                            .map(|j| {
                                b.scope(&format!("block{j}"), |b| ResidualBlock {
                                    conv1: Conv2d::new(b, "conv1", ch, ch, 3, 1),
                                    conv2: Conv2d::new(b, "conv2", ch, ch, 3, 1),
                                })
                            })
                            .collect(),
                    });
                    prev = ch;
                    stage
                })
                .collect();
            Self {
                stem,
                stages,
                config: config.clone(),
            }
        })
    }

    /// Three stage maps, finest first.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<[Var; 3]> {
        let shape = s.tape.shape(x);
        let (h, w) = (shape[1], shape[2]);
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::TooSmall {
                height: h,
                width: w,
                min: MIN_INPUT_SIDE,
            });
        }
        let y = self.stem.forward(s, x);
        let mut y = s.tape.relu(y);
        let mut out = Vec::with_capacity(3);
        for stage in &self.stages {
            let d = stage.down.forward(s, y);
            y = s.tape.relu(d);
            for block in &stage.blocks {
                y = block.forward(s, y);
            }
            out.push(y);
        }
        Ok([out[0], out[1], out[2]])
    }
}

/// Multi-scale maps of one stream, all with the same channel width.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `[C_out, H_l, W_l]` maps, coarse to fine.
    pub levels: Vec<Var>,
    pub dims: Vec<(usize, usize)>,
    pub source: Source,
}

/// Lateral 1×1 projections plus a nearest-upsampling top-down path over
/// three encoder stages and the (pooled) raw input.
#[derive(Debug, Clone)]
pub struct FpnNeck {
    raw_lateral: Conv2d,
    laterals: Vec<Conv2d>,
    pub out_channels: usize,
    pub skip_pool: usize,
}

impl FpnNeck {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        raw_channels: usize,
        stage_channels: [usize; 3],
        out_channels: usize,
        skip_pool: usize,
    ) -> Self {
        b.scope("neck", |b| Self {
            raw_lateral: Conv2d::new(b, "lateral_raw", raw_channels, out_channels, 1, 1),
            laterals: (0..3)
                .map(|i| Conv2d::new(b, &format!("lateral{i}"), stage_channels[i], out_channels, 1, 1))
                .collect(),
            out_channels,
            skip_pool: skip_pool.max(1),
        })
    }

    /// `stages` finest first (strides 4, 8, 16); `raw` is the stream input.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        stages: [Var; 3],
        raw: Var,
        source: Source,
    ) -> Result<FeaturePyramid> {
        let raw = if self.skip_pool > 1 {
            s.tape.avg_pool(raw, self.skip_pool)
        } else {
            raw
        };
        let mut inputs = vec![(raw, &self.raw_lateral)];
        inputs.extend(stages.iter().copied().zip(&self.laterals));
        for pair in inputs.windows(2) {
            let (fine, coarse) = (s.tape.shape(pair[0].0), s.tape.shape(pair[1].0));
            if coarse[1] > fine[1] || coarse[2] > fine[2] {
                return Err(Error::Shape(format!(
                    "pyramid level {:?} is coarser than the next level {:?}",
                    &fine[1..],
                    &coarse[1..]
                )));
            }
        }
        let mut levels = Vec::with_capacity(4);
        let mut dims = Vec::with_capacity(4);
        let mut top: Option<Var> = None;
        for &(x, lateral) in inputs.iter().rev() {
            let lat = lateral.forward(s, x);
            let shape = s.tape.shape(lat).to_vec();
            let y = match top {
                Some(t) => {
                    let up = s.tape.upsample_nearest(t, shape[1], shape[2]);
                    s.tape.add(lat, up)
                }
                None => lat,
            };
            levels.push(y);
            dims.push((shape[1], shape[2]));
            top = Some(y);
        }
        Ok(FeaturePyramid { levels, dims, source })
    }
}

/// Adapter (radar only), encoder and neck of one input stream.
#[derive(Debug, Clone)]
pub struct StreamBackbone {
    pub source: Source,
    pub adapter: Option<ChannelAdapter>,
    pub encoder: Encoder,
    pub neck: FpnNeck,
    pub in_channels: usize,
}

/// Channels the shared encoder definition expects.
pub const ENCODER_INPUT_CHANNELS: usize = 3;

impl StreamBackbone {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        source: Source,
        in_channels: usize,
        config: &EncoderConfig,
        out_channels: usize,
        skip_pool: usize,
    ) -> Self {
        b.scope(source.name(), |b| {
            let adapter =
                (in_channels != ENCODER_INPUT_CHANNELS).then(|| ChannelAdapter::new(b, in_channels, ENCODER_INPUT_CHANNELS));
            let encoder = Encoder::new(b, ENCODER_INPUT_CHANNELS, config);
            let neck = FpnNeck::new(b, in_channels, config.stage_channels, out_channels, skip_pool);
            Self {
                source,
                adapter,
                encoder,
                neck,
                in_channels,
            }
        })
    }

    /// `x: [C_in, H, W]` (already normalised) to a feature pyramid.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<FeaturePyramid> {
        let got = s.tape.shape(x)[0];
        if got != self.in_channels {
            return Err(Error::Channels {
                expected: self.in_channels,
                got,
            });
        }
        let enc_in = match &self.adapter {
            Some(a) => a.forward(s, x)?,
            None => x,
        };
        let stages = self.encoder.forward(s, enc_in)?;
        self.neck.forward(s, stages, x, self.source)
    }
}
