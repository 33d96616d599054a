//! Decoders recovering stride 4 from the encoder pyramid.

use crate::backbone::{ContextHead, FeatureMap, PoolingStrategy, PYRAMID_STRIDES};
use crate::error::{config, shape, Result};
use crate::nn::{ConvBn, Ctx, Declarations, ResidualBlock};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderStyle {
    /// Residual upsample modules with global context.
    #[default]
    Upsample,
    /// Lateral 1x1 convolutions, nearest upsampling, one 3x3 convolution per merge.
    Fpn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub channels: usize,
    #[serde(default)]
    pub style: DecoderStyle,
    /// Pooled context feeding the stride-32 module. Ignored by the FPN style.
    #[serde(default = "yes")]
    pub global_context: bool,
}

fn yes() -> bool {
    true
}

impl DecoderSpec {
    pub fn upsample(channels: usize) -> Self {
        DecoderSpec {
            channels,
            style: DecoderStyle::Upsample,
            global_context: true,
        }
    }

    pub fn fpn(channels: usize) -> Self {
        DecoderSpec {
            channels,
            style: DecoderStyle::Fpn,
            global_context: false,
        }
    }

    pub fn uses_context(&self) -> bool {
        self.style == DecoderStyle::Upsample && self.global_context
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return config(format!("decoder channels {} must be a positive multiple of 4", self.channels));
        }
        Ok(())
    }
}

/// `fuse(transform(encoder) + upsample(previous))`.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleModule {
    pub stride: usize,
    pub channels: usize,
    pub transform: ResidualBlock,
    pub fuse: ResidualBlock,
}

impl UpsampleModule {
    pub fn new(prefix: &str, stride: usize, enc_channels: usize, d: usize) -> Self {
        let name = format!("{prefix}decoder.level{stride}");
        UpsampleModule {
            stride,
            channels: d,
            transform: ResidualBlock::bottleneck(&format!("{name}.transform"), enc_channels, d / 4, d, 1),
            fuse: ResidualBlock::bottleneck(&format!("{name}.fuse"), d, d / 4, d, 1),
        }
    }

    pub fn declare(&self, d: &mut Declarations) {
        self.transform.declare(d);
        self.fuse.declare(d);
    }

    /// `previous` is either the next-coarser decoder level, the context
    /// feature (1x1 or full-size at stride 32), or absent.
    pub fn forward(&self, ctx: &mut Ctx, enc: FeatureMap, previous: Option<FeatureMap>) -> Result<FeatureMap> {
        if enc.stride != self.stride {
            return shape(format!("level {} received a stride-{} encoder feature", self.stride, enc.stride));
        }
        let es = ctx.g.shape(enc.var);
        if es.c != self.transform.in_channels() {
            return shape(format!(
                "level {} expects {} encoder channels, got {}",
                self.stride,
                self.transform.in_channels(),
                es.c
            ));
        }
        let t = self.transform.forward(ctx, enc.var);
        let merged = match previous {
            None => t,
            Some(p) => {
                let ps = ctx.g.shape(p.var);
                if ps.c != self.channels {
                    return shape(format!("previous feature has {} channels, expected {}", ps.c, self.channels));
                }
                if p.stride != 2 * self.stride && p.stride != self.stride {
                    return shape(format!("level {} cannot take a stride-{} feature", self.stride, p.stride));
                }
                if (ps.h, ps.w) == (1, 1) {
                    ctx.g.add_spatial_broadcast(t, p.var)
                } else {
                    let up = ctx.g.resize_bilinear(p.var, es.h, es.w);
                    ctx.g.add(t, up)
                }
            }
        };
        Ok(FeatureMap {
            var: self.fuse.forward(ctx, merged),
            stride: self.stride,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderBody {
    /// Modules in processing order: strides 32, 16, 8, 4.
    Upsample(Vec<UpsampleModule>),
    Fpn {
        /// Indexed like the pyramid: strides 4, 8, 16, 32.
        laterals: Vec<ConvBn>,
        /// Merges at strides 16, 8, 4.
        smooth: Vec<ConvBn>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub context: Option<ContextHead>,
    pub body: DecoderBody,
    /// 3x3 convolution on the stride-4 output.
    pub refine: ConvBn,
}

pub struct DecoderOutput {
    /// Per-level outputs at strides 4, 8, 16, 32.
    pub levels: Vec<FeatureMap>,
    pub out: FeatureMap,
}

impl Decoder {
    pub fn new(prefix: &str, enc_channels: [usize; 4], spec: DecoderSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.channels;
        let context = spec
            .uses_context()
            .then(|| ContextHead::new(prefix, enc_channels[3], d));
        let body = match spec.style {
            DecoderStyle::Upsample => DecoderBody::Upsample(
                (0..4)
                    .rev()
                    .map(|i| UpsampleModule::new(prefix, PYRAMID_STRIDES[i], enc_channels[i], d))
                    .collect(),
            ),
            DecoderStyle::Fpn => DecoderBody::Fpn {
                laterals: (0..4)
                    .map(|i| {
                        let name = format!("{prefix}decoder.lateral{}", PYRAMID_STRIDES[i]);
                        ConvBn::new(&name, enc_channels[i], d, 1, 1, false)
                    })
                    .collect(),
                smooth: (0..3)
                    .rev()
                    .map(|i| {
                        let name = format!("{prefix}decoder.smooth{}", PYRAMID_STRIDES[i]);
                        ConvBn::new(&name, d, d, 3, 1, true)
                    })
                    .collect(),
            },
        };
        Ok(Decoder {
            spec,
            context,
            body,
            refine: ConvBn::new(&format!("{prefix}decoder.refine"), d, d, 3, 1, true),
        })
    }

    pub fn declare(&self, d: &mut Declarations) {
        if let Some(c) = &self.context {
            c.declare(d);
        }
        match &self.body {
            DecoderBody::Upsample(levels) => levels.iter().for_each(|m| m.declare(d)),
            DecoderBody::Fpn { laterals, smooth } => {
                laterals.iter().for_each(|l| l.declare(d));
                smooth.iter().for_each(|s| s.declare(d));
            }
        }
        self.refine.declare(d);
    }

    pub fn forward(&self, ctx: &mut Ctx, pyramid: &[FeatureMap], pooling: PoolingStrategy) -> Result<DecoderOutput> {
        if pyramid.len() != 4 || pyramid.iter().zip(PYRAMID_STRIDES).any(|(f, s)| f.stride != s) {
            return shape("decoder expects a pyramid at strides 4, 8, 16, 32");
        }
        let mut levels = Vec::with_capacity(4);
        match &self.body {
            DecoderBody::Upsample(modules) => {
                let mut prev = match &self.context {
                    Some(c) => Some(c.forward(ctx, pyramid[3], pooling)?),
                    None => None,
                };
                for (m, enc) in modules.iter().zip(pyramid.iter().rev()) {
                    let out = m.forward(ctx, *enc, prev)?;
                    levels.push(out);
                    prev = Some(out);
                }
            }
            DecoderBody::Fpn { laterals, smooth } => {
                let mut prev = FeatureMap {
                    var: laterals[3].forward(ctx, pyramid[3].var),
                    stride: 32,
                };
                levels.push(prev);
                for (i, sm) in (0..3).rev().zip(smooth) {
                    let lat = laterals[i].forward(ctx, pyramid[i].var);
                    let s = ctx.g.shape(lat);
                    let up = ctx.g.resize_nearest(prev.var, s.h, s.w);
                    let merged = ctx.g.add(lat, up);
                    prev = FeatureMap {
                        var: sm.forward(ctx, merged),
                        stride: PYRAMID_STRIDES[i],
                    };
                    levels.push(prev);
                }
            }
        }
        levels.reverse();
        debug_assert!(levels.iter().zip(PYRAMID_STRIDES).all(|(l, s)| l.stride == s));
        let out = FeatureMap {
            var: self.refine.forward(ctx, levels[0].var),
            stride: 4,
        };
        Ok(DecoderOutput { levels, out })
    }
}
