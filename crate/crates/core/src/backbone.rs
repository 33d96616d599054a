//! ResNet encoder: stem, four residual stages, global-context head.

use crate::error::{config, shape, Result};
use crate::graph::Var;
use crate::nn::{ConvBn, Ctx, Declarations, ResidualBlock};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// A spatial feature with its downsampling factor relative to the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const STEM_WIDTH: usize = 64;
const BASE_PLANES: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Positive rational `num/den` written as `"1/8"` or `"1"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return config(format!("ratio {num}/{den} must be positive"));
        }
        Ok(Ratio { num, den })
    }

    /// `base * self`, which must be a positive integer.
    pub fn scale(&self, base: usize) -> Result<usize> {
        let p = base * self.num;
        if p % self.den != 0 || p / self.den == 0 {
            return config(format!("width {self} does not divide {base} channels"));
        }
        Ok(p / self.den)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Ratio {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| crate::error::Error::Config(format!("bad ratio {s:?}")))
        };
        match s.split_once('/') {
            Some((a, b)) => Ratio::new(parse(a)?, parse(b)?),
            None => Ratio::new(parse(s)?, 1),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub depth: u32,
    #[serde(default = "one")]
    pub width: Ratio,
}

fn one() -> Ratio {
    Ratio::ONE
}

impl EncoderSpec {
    pub fn new(depth: u32, width: Ratio) -> Self {
        EncoderSpec { depth, width }
    }

    pub fn resnet(depth: u32) -> Self {
        Self::new(depth, Ratio::ONE)
    }

    pub fn block_layout(&self) -> Result<(BlockKind, [usize; 4])> {
        Ok(match self.depth {
            18 => (BlockKind::Basic, [2, 2, 2, 2]),
            50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
            101 => (BlockKind::Bottleneck, [3, 4, 23, 3]),
            152 => (BlockKind::Bottleneck, [3, 8, 36, 3]),
            d => return config(format!("unsupported encoder depth {d}")),
        })
    }

    pub fn stem_width(&self) -> Result<usize> {
        self.width.scale(STEM_WIDTH)
    }

    /// Per-block bottleneck widths at strides 4/8/16/32.
    pub fn planes(&self) -> Result<[usize; 4]> {
        let mut out = [0; 4];
        for (o, b) in out.iter_mut().zip(BASE_PLANES) {
            *o = self.width.scale(b)?;
        }
        Ok(out)
    }

    /// Output channels at strides 4/8/16/32.
    pub fn stage_channels(&self) -> Result<[usize; 4]> {
        let (kind, _) = self.block_layout()?;
        Ok(self.planes()?.map(|p| p * kind.expansion()))
    }

    pub fn validate(&self) -> Result<()> {
        self.block_layout()?;
        self.stem_width()?;
        let ch = self.stage_channels()?;
        if ch.windows(2).any(|w| w[0] > w[1]) {
            return config("stage channels must be nondecreasing");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolingStrategy {
    Gap,
    /// Sliding average with kernel `ceil(crop / 32)` at stride 1.
    Ap { crop: usize },
}

impl PoolingStrategy {
    pub fn ap_kernel(crop: usize) -> Result<usize> {
        if crop < 32 {
            return config(format!("AP crop {crop} gives a kernel below 1 at stride 32"));
        }
        Ok(crop.div_ceil(32))
    }
}

/// How an encoder receives its input.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderInput {
    /// 7x7 stride-2 convolution and 3x3 stride-2 max pool on an RGB image.
    Stem(ConvBn),
    /// 3x3 convolution on a stride-4 feature from the previous stage.
    Entry(ConvBn),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub input: EncoderInput,
    pub layers: Vec<Vec<ResidualBlock>>,
    pub channels: [usize; 4],
}

impl Encoder {
    /// `entry_channels` is `None` for an image stem, or the width of the
    /// stride-4 feature an entry block consumes.
    pub fn new(prefix: &str, spec: EncoderSpec, entry_channels: Option<usize>) -> Result<Self> {
        spec.validate()?;
        let stem_w = spec.stem_width()?;
        let input = match entry_channels {
            None => EncoderInput::Stem(ConvBn::new(&format!("{prefix}stem"), 3, stem_w, 7, 2, true)),
            Some(c) => EncoderInput::Entry(ConvBn::new(&format!("{prefix}entry"), c, stem_w, 3, 1, true)),
        };
        let (kind, counts) = spec.block_layout()?;
        let planes = spec.planes()?;
        let channels = spec.stage_channels()?;
        let mut in_c = stem_w;
        let mut layers = Vec::new();
        for (i, &n) in counts.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}stage{}.block{b}", i + 1);
                blocks.push(match kind {
                    BlockKind::Basic => ResidualBlock::basic(&name, in_c, channels[i], stride),
                    BlockKind::Bottleneck => {
                        ResidualBlock::bottleneck(&name, in_c, planes[i], channels[i], stride)
                    }
                });
                in_c = channels[i];
            }
            layers.push(blocks);
        }
        Ok(Encoder {
            spec,
            input,
            layers,
            channels,
        })
    }

    pub fn declare(&self, d: &mut Declarations) {
        match &self.input {
            EncoderInput::Stem(c) | EncoderInput::Entry(c) => c.declare(d),
        }
        for b in self.layers.iter().flatten() {
            b.declare(d);
        }
    }

    /// Image (stride 1, 3 channels) to the stride-4 stem output.
    pub fn stem_forward(&self, ctx: &mut Ctx, image: Var) -> Result<FeatureMap> {
        let EncoderInput::Stem(stem) = &self.input else {
            return config("encoder has an entry block, not an image stem");
        };
        let s = ctx.g.shape(image);
        if s.c != 3 {
            return shape(format!("stem expects 3 channels, got {}", s.c));
        }
        if s.h < 8 || s.w < 8 {
            return shape(format!("input {}x{} is smaller than the 8x8 minimum", s.h, s.w));
        }
        let x = stem.forward(ctx, image);
        let x = ctx.g.max_pool_3x3s2(x);
        debug_assert_eq!(ctx.g.shape(x).h, s.h.div_ceil(4));
        Ok(FeatureMap { var: x, stride: 4 })
    }

    /// Run the input block and the four residual stages. `after_stage(ctx, i, x)`
    /// may replace the output of stage `i` before it feeds stage `i + 1`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        input: FeatureMap,
        after_stage: &mut dyn FnMut(&mut Ctx, usize, Var) -> Result<Var>,
    ) -> Result<Vec<FeatureMap>> {
        let mut x = match &self.input {
            EncoderInput::Stem(_) => {
                if input.stride != 1 {
                    return shape("image stem expects a stride-1 input");
                }
                self.stem_forward(ctx, input.var)?
            }
            EncoderInput::Entry(entry) => {
                if input.stride != 4 {
                    return shape(format!("entry block expects stride 4, got {}", input.stride));
                }
                FeatureMap {
                    var: entry.forward(ctx, input.var),
                    stride: 4,
                }
            }
        };
        let mut pyramid = Vec::with_capacity(4);
        for (i, blocks) in self.layers.iter().enumerate() {
            let in_shape = ctx.g.shape(x.var);
            let mut v = x.var;
            for b in blocks {
                v = b.forward(ctx, v);
            }
            let stride = if i == 0 { 4 } else { x.stride * 2 };
            let s = ctx.g.shape(v);
            let expect = if i == 0 {
                (in_shape.h, in_shape.w)
            } else {
                (in_shape.h.div_ceil(2), in_shape.w.div_ceil(2))
            };
            assert_eq!((s.h, s.w), expect, "stride bookkeeping at stage {}", i + 1);
            assert_eq!(stride, PYRAMID_STRIDES[i]);
            assert_eq!(s.c, self.channels[i]);
            v = after_stage(ctx, i, v)?;
            x = FeatureMap { var: v, stride };
            pyramid.push(x);
        }
        Ok(pyramid)
    }
}

/// Pooled image-level context followed by a 1x1 projection with
/// normalization and rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextHead {
    pub proj: ConvBn,
}

impl ContextHead {
    pub fn new(prefix: &str, in_c: usize, out_c: usize) -> Self {
        ContextHead {
            proj: ConvBn::new(&format!("{prefix}context.proj"), in_c, out_c, 1, 1, true),
        }
    }

    pub fn declare(&self, d: &mut Declarations) {
        self.proj.declare(d);
    }

    /// Pooling only, before the projection.
    pub fn pool(ctx: &mut Ctx, deepest: FeatureMap, strategy: PoolingStrategy) -> Result<Var> {
        if deepest.stride != 32 {
            return shape(format!("global context expects stride 32, got {}", deepest.stride));
        }
        Ok(match strategy {
            PoolingStrategy::Gap => ctx.g.global_avg_pool(deepest.var),
            PoolingStrategy::Ap { crop } => {
                let k = PoolingStrategy::ap_kernel(crop)?;
                ctx.g.sliding_avg_pool(deepest.var, k)
            }
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, deepest: FeatureMap, strategy: PoolingStrategy) -> Result<FeatureMap> {
        let pooled = Self::pool(ctx, deepest, strategy)?;
        Ok(FeatureMap {
            var: self.proj.forward(ctx, pooled),
            stride: 32,
        })
    }
}
