//! Links between consecutive stages: semantic prediction guidance and the
//! squeeze/gather-and-excite baselines.

use crate::backbone::FeatureMap;
use crate::error::{config, shape, Result};
use crate::graph::Var;
use crate::nn::{Conv, ConvBn, Ctx, Declarations};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpgVariant {
    /// Remapped logits added to the decoder feature; no mask.
    Sum,
    /// Mask normalized over the spatial positions of each channel.
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpgConfig {
    pub variant: SpgVariant,
    #[serde(default = "yes")]
    pub identity_path: bool,
    #[serde(default = "yes")]
    pub supervised: bool,
}

fn yes() -> bool {
    true
}

impl Default for SpgConfig {
    fn default() -> Self {
        SpgConfig {
            variant: SpgVariant::Sigmoid,
            identity_path: true,
            supervised: true,
        }
    }
}

pub const SE_REDUCTION: usize = 16;

/// What connects a stage's decoder output to the next stage's encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinkSpec {
    Spg(SpgConfig),
    /// Output convolution only.
    Pass {
        #[serde(default = "yes")]
        supervised: bool,
    },
    Se {
        #[serde(default = "se_reduction")]
        reduction: usize,
        #[serde(default = "yes")]
        supervised: bool,
    },
    /// `extent = None` pools over the whole map.
    Ge {
        #[serde(default)]
        extent: Option<usize>,
        #[serde(default = "yes")]
        supervised: bool,
    },
}

fn se_reduction() -> usize {
    SE_REDUCTION
}

impl LinkSpec {
    pub fn supervised(&self) -> bool {
        match *self {
            LinkSpec::Spg(c) => c.supervised,
            LinkSpec::Pass { supervised } | LinkSpec::Se { supervised, .. } | LinkSpec::Ge { supervised, .. } => {
                supervised
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinkBody {
    Excite { mask: Conv, transform: Conv },
    Sum { remap: Conv },
    Pass,
    Se { fc1: Conv, fc2: Conv },
    Ge { extent: Option<usize> },
}

/// Outputs of one link: the next stage's input, the per-class logits, and
/// the attention mask when the variant has one.
pub struct GuidedAttentionBundle {
    pub next_input: FeatureMap,
    pub logits: Var,
    pub mask: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLink {
    pub spec: LinkSpec,
    pub channels: usize,
    pub classes: usize,
    pub cls: Conv,
    pub body: LinkBody,
    pub out: ConvBn,
}

impl StageLink {
    /// Parameters are named `spg.stage{stage}.*`.
    pub fn new(stage: usize, spec: LinkSpec, d: usize, c: usize) -> Result<Self> {
        let p = format!("spg.stage{stage}");
        let body = match spec {
            LinkSpec::Spg(cfg) => match cfg.variant {
                SpgVariant::Sum => LinkBody::Sum {
                    remap: Conv::new(format!("{p}.remap"), c, d, 1, 1, true),
                },
                _ => LinkBody::Excite {
                    mask: Conv::new(format!("{p}.mask"), c, d, 1, 1, true),
                    transform: Conv::new(format!("{p}.transform"), d, d, 1, 1, false),
                },
            },
            LinkSpec::Pass { .. } => LinkBody::Pass,
            LinkSpec::Se { reduction, .. } => {
                if reduction == 0 || d % reduction != 0 {
                    return config(format!("SE reduction {reduction} must divide {d}"));
                }
                LinkBody::Se {
                    fc1: Conv::new(format!("{p}.se.fc1"), d, d / reduction, 1, 1, true),
                    fc2: Conv::new(format!("{p}.se.fc2"), d / reduction, d, 1, 1, true),
                }
            }
            LinkSpec::Ge { extent, .. } => {
                if extent.is_some_and(|e| e < 2) {
                    return config("GE extent must be at least 2");
                }
                LinkBody::Ge { extent }
            }
        };
        Ok(StageLink {
            spec,
            channels: d,
            classes: c,
            cls: Conv::new(format!("{p}.cls"), d, c, 1, 1, true),
            body,
            out: ConvBn::new(&format!("{p}.out"), d, d, 1, 1, true),
        })
    }

    pub fn declare(&self, d: &mut Declarations) {
        self.cls.declare(d);
        match &self.body {
            LinkBody::Excite { mask, transform } => {
                mask.declare(d);
                transform.declare(d);
            }
            LinkBody::Sum { remap } => remap.declare(d),
            LinkBody::Se { fc1, fc2 } => {
                fc1.declare(d);
                fc2.declare(d);
            }
            LinkBody::Pass | LinkBody::Ge { .. } => {}
        }
        self.out.declare(d);
    }

    pub fn forward(&self, ctx: &mut Ctx, x_d: FeatureMap) -> Result<GuidedAttentionBundle> {
        let s = ctx.g.shape(x_d.var);
        if s.c != self.channels {
            return shape(format!("link expects {} channels, got {}", self.channels, s.c));
        }
        let logits = self.cls.forward(ctx, x_d.var);
        let mut mask = None;
        let pre_out = match &self.body {
            LinkBody::Excite { mask: mask_conv, transform } => {
                let LinkSpec::Spg(cfg) = self.spec else { unreachable!() };
                let pre = mask_conv.forward(ctx, logits);
                let m = match cfg.variant {
                    SpgVariant::Softmax => ctx.g.spatial_softmax(pre),
                    _ => ctx.g.sigmoid(pre),
                };
                debug_assert!(mask_invariant_holds(ctx.g.value(m), cfg.variant));
                mask = Some(m);
                let t = transform.forward(ctx, x_d.var);
                let excited = ctx.g.mul(m, t);
                if cfg.identity_path {
                    ctx.g.add(x_d.var, excited)
                } else {
                    excited
                }
            }
            LinkBody::Sum { remap } => {
                let r = remap.forward(ctx, logits);
                ctx.g.add(x_d.var, r)
            }
            LinkBody::Pass => x_d.var,
            LinkBody::Se { fc1, fc2 } => se_reweight(ctx, x_d.var, fc1, fc2),
            LinkBody::Ge { extent } => ge_reweight(ctx, x_d.var, *extent)?,
        };
        Ok(GuidedAttentionBundle {
            next_input: FeatureMap {
                var: self.out.forward(ctx, pre_out),
                stride: x_d.stride,
            },
            logits,
            mask,
        })
    }
}

/// Sigmoid masks lie in `[0, 1]` (open interval up to rounding); softmax
/// masks sum to one over each channel's plane.
pub fn mask_invariant_holds(m: &crate::tensor::Tensor, variant: SpgVariant) -> bool {
    let s = m.shape();
    match variant {
        SpgVariant::Sigmoid => m.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
        SpgVariant::Softmax => (0..s.n).all(|n| {
            (0..s.c).all(|c| (m.plane(n, c).iter().sum::<f64>() - 1.0).abs() <= 1e-5)
        }),
        SpgVariant::Sum => true,
    }
}

/// Channel gate from the global average through a reducing and an expanding
/// 1x1 transform.
pub fn se_reweight(ctx: &mut Ctx, x: Var, fc1: &Conv, fc2: &Conv) -> Var {
    let pooled = ctx.g.global_avg_pool(x);
    let h = fc1.forward(ctx, pooled);
    let h = ctx.g.relu(h);
    let h = fc2.forward(ctx, h);
    let gate = ctx.g.sigmoid(h);
    ctx.g.mul_channel(x, gate)
}

/// Spatial gate from block averages over `extent x extent` neighbourhoods,
/// brought back to full size by nearest upsampling.
pub fn ge_reweight(ctx: &mut Ctx, x: Var, extent: Option<usize>) -> Result<Var> {
    let s = ctx.g.shape(x);
    let k = extent.unwrap_or(s.h.max(s.w));
    if k > s.h.max(s.w) {
        return shape(format!("GE extent {k} exceeds the {}x{} map", s.h, s.w));
    }
    let pooled = ctx.g.block_avg_pool(x, k);
    let up = ctx.g.resize_nearest(pooled, s.h, s.w);
    let gate = ctx.g.sigmoid(up);
    Ok(ctx.g.mul(x, gate))
}
