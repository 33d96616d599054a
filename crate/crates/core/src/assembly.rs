//! Stacked encoder-decoder stages joined by links and cross-stage feature
//! aggregation.

use crate::attention::{LinkSpec, StageLink};
use crate::backbone::{Encoder, EncoderSpec, FeatureMap, PoolingStrategy, PYRAMID_STRIDES};
use crate::decoder::{Decoder, DecoderSpec};
use crate::error::{config, shape, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, ConvBn, Ctx, Declarations, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    /// Present on every stage but the last.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkPlan {
    pub num_classes: usize,
    #[serde(default = "yes")]
    pub csfa: bool,
    pub stages: Vec<StagePlan>,
}

fn yes() -> bool {
    true
}

impl NetworkPlan {
    /// `n` identical stages joined by `link`.
    pub fn uniform(n: usize, encoder: EncoderSpec, decoder: DecoderSpec, link: LinkSpec, num_classes: usize) -> Self {
        Self::from_encoders(&vec![encoder; n], decoder, link, num_classes)
    }

    pub fn from_encoders(encoders: &[EncoderSpec], decoder: DecoderSpec, link: LinkSpec, num_classes: usize) -> Self {
        let n = encoders.len();
        NetworkPlan {
            num_classes,
            csfa: true,
            stages: encoders
                .iter()
                .enumerate()
                .map(|(i, &encoder)| StagePlan {
                    encoder,
                    decoder,
                    link: (i + 1 < n).then_some(link),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return config("a network needs at least one stage");
        }
        if self.num_classes == 0 {
            return config("num_classes must be positive");
        }
        let d = self.decoder_channels();
        for (i, st) in self.stages.iter().enumerate() {
            st.encoder.validate()?;
            st.decoder.validate()?;
            if st.decoder.channels != d {
                return config("decoder channels must match across stages");
            }
            let last = i + 1 == self.stages.len();
            match (&st.link, last) {
                (Some(_), true) => return config(format!("final stage {} cannot have a link", i + 1)),
                (None, false) => return config(format!("stage {} needs a link to the next stage", i + 1)),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn decoder_channels(&self) -> usize {
        self.stages[0].decoder.channels
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Per-scale aggregation of the previous stage's encoder and decoder
/// features into the current encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Csfa {
    /// Indexed by pyramid level: (encoder branch, decoder branch).
    pub levels: Vec<(ConvBn, ConvBn)>,
}

impl Csfa {
    fn new(prefix: &str, prev_enc: [usize; 4], d: usize, cur: [usize; 4]) -> Self {
        Csfa {
            levels: (0..4)
                .map(|i| {
                    let base = format!("{prefix}csfa.level{}", PYRAMID_STRIDES[i]);
                    (
                        ConvBn::new(&format!("{base}.enc"), prev_enc[i], cur[i], 1, 1, false),
                        ConvBn::new(&format!("{base}.dec"), d, cur[i], 1, 1, false),
                    )
                })
                .collect(),
        }
    }

    fn declare(&self, d: &mut Declarations) {
        for (e, dd) in &self.levels {
            e.declare(d);
            dd.declare(d);
        }
    }

    /// `cur + enc(prev_enc) + dec(prev_dec)` at pyramid level `level`.
    pub fn aggregate(&self, ctx: &mut Ctx, level: usize, prev_enc: FeatureMap, prev_dec: FeatureMap, cur: FeatureMap) -> Result<Var> {
        if prev_enc.stride != cur.stride || prev_dec.stride != cur.stride {
            return shape(format!(
                "aggregation strides differ: {} / {} / {}",
                prev_enc.stride, prev_dec.stride, cur.stride
            ));
        }
        let (enc, dec) = &self.levels[level];
        let a = enc.forward(ctx, prev_enc.var);
        let b = dec.forward(ctx, prev_dec.var);
        let x = ctx.g.add(cur.var, a);
        Ok(ctx.g.add(x, b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub csfa: Option<Csfa>,
    pub link: Option<StageLink>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub plan: NetworkPlan,
    pub stages: Vec<Stage>,
    pub head: Conv,
}

/// Intermediate features of one stage, kept for aggregation and inspection.
pub struct StageTrace {
    pub pyramid: Vec<FeatureMap>,
    pub decoder_levels: Vec<FeatureMap>,
    pub decoder_out: FeatureMap,
    pub mask: Option<Var>,
}

pub struct ForwardOutput {
    /// One map per stage at stride 4: link logits, then the head's logits.
    pub per_stage_logits: Vec<Var>,
    /// Whether each stage's logits enter the loss.
    pub supervised: Vec<bool>,
    /// Final-stage logits at input resolution.
    pub final_prediction: Var,
    pub traces: Vec<StageTrace>,
}

impl Network {
    pub fn build(plan: &NetworkPlan) -> Result<Self> {
        plan.validate()?;
        let d = plan.decoder_channels();
        let mut stages = Vec::new();
        let mut prev_channels: Option<[usize; 4]> = None;
        for (i, sp) in plan.stages.iter().enumerate() {
            let prefix = format!("s{}.", i + 1);
            let entry = (i > 0).then_some(d);
            let encoder = Encoder::new(&prefix, sp.encoder, entry)?;
            let decoder = Decoder::new(&prefix, encoder.channels, sp.decoder)?;
            let csfa = match prev_channels {
                Some(prev) if plan.csfa => Some(Csfa::new(&prefix, prev, d, encoder.channels)),
                _ => None,
            };
            let link = match sp.link {
                Some(l) => Some(StageLink::new(i + 1, l, d, plan.num_classes)?),
                None => None,
            };
            prev_channels = Some(encoder.channels);
            stages.push(Stage {
                encoder,
                decoder,
                csfa,
                link,
            });
        }
        Ok(Network {
            plan: plan.clone(),
            stages,
            head: Conv::new("head", d, plan.num_classes, 1, 1, true),
        })
    }

    pub fn declarations(&self) -> Declarations {
        let mut d = Declarations::default();
        for st in &self.stages {
            st.encoder.declare(&mut d);
            st.decoder.declare(&mut d);
            if let Some(c) = &st.csfa {
                c.declare(&mut d);
            }
            if let Some(l) = &st.link {
                l.declare(&mut d);
            }
        }
        self.head.declare(&mut d);
        d
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::initialize(&self.declarations(), seed)
    }

    pub fn forward(&self, ctx: &mut Ctx, image: Var, pooling: PoolingStrategy) -> Result<ForwardOutput> {
        let is = ctx.g.shape(image);
        let mut input = FeatureMap { var: image, stride: 1 };
        let mut per_stage_logits = Vec::new();
        let mut supervised = Vec::new();
        let mut traces: Vec<StageTrace> = Vec::new();
        for st in &self.stages {
            let prev = traces.last();
            let mut hook = |ctx: &mut Ctx, level: usize, x: Var| -> Result<Var> {
                match (&st.csfa, prev) {
                    (Some(c), Some(p)) => {
                        let cur = FeatureMap {
                            var: x,
                            stride: PYRAMID_STRIDES[level],
                        };
                        c.aggregate(ctx, level, p.pyramid[level], p.decoder_levels[level], cur)
                    }
                    _ => Ok(x),
                }
            };
            let pyramid = st.encoder.forward(ctx, input, &mut hook)?;
            let dec = st.decoder.forward(ctx, &pyramid, pooling)?;
            let mut mask = None;
            match &st.link {
                Some(link) => {
                    let bundle = link.forward(ctx, dec.out)?;
                    per_stage_logits.push(bundle.logits);
                    supervised.push(link.spec.supervised());
                    mask = bundle.mask;
                    input = bundle.next_input;
                }
                None => {
                    per_stage_logits.push(self.head.forward(ctx, dec.out.var));
                    supervised.push(true);
                }
            }
            traces.push(StageTrace {
                pyramid,
                decoder_levels: dec.levels,
                decoder_out: dec.out,
                mask,
            });
        }
        let last = *per_stage_logits.last().expect("at least one stage");
        let final_prediction = ctx.g.resize_bilinear(last, is.h, is.w);
        Ok(ForwardOutput {
            per_stage_logits,
            supervised,
            final_prediction,
            traces,
        })
    }

    /// Inference-mode logits at input resolution.
    pub fn predict_logits(&self, store: &ParamStore, image: &Tensor, pooling: PoolingStrategy) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let x = g.input(image.clone());
        let mut ctx = Ctx::new(&mut g, store);
        let out = self.forward(&mut ctx, x, pooling)?;
        Ok(g.value(out.final_prediction).clone())
    }
}
