//! Named parameters and the small layer vocabulary the network is built from.

use crate::graph::{BnUpdate, Graph, Var};
use crate::kernels::ConvGeometry;
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::sync::Arc;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He normal with fan-out `out_channels * k * k`.
    KaimingOut(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    /// Subject to weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferSpec {
    pub name: String,
    pub len: usize,
    pub fill: f64,
}

/// Everything a module declares: learnable tensors plus running buffers.
#[derive(Clone, Debug, Default)]
pub struct Declarations {
    pub params: Vec<ParamSpec>,
    pub buffers: Vec<BufferSpec>,
}

impl Declarations {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.len()).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
    decay: BTreeMap<String, bool>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocate and initialize every declared tensor. Initialization follows
    /// declaration order with a single seeded stream.
    pub fn initialize(decl: &Declarations, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for p in &decl.params {
            let t = match p.init {
                Init::Zeros => Tensor::zeros(p.shape),
                Init::Ones => Tensor::full(p.shape, 1.0),
                Init::KaimingOut(fan_out) => {
                    let std = (2.0 / fan_out as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    let data = (0..p.shape.len()).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_vec(p.shape, data)
                }
            };
            store.insert(&p.name, t, p.decay);
        }
        for b in &decl.buffers {
            store.buffers.insert(b.name.clone(), vec![b.fill; b.len]);
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Tensor, decay: bool) {
        self.params.insert(name.to_string(), Arc::new(value));
        self.decay.insert(name.to_string(), decay);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.params.get(name)
    }

    /// Mutable access; clones the tensor if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn decays(&self, name: &str) -> bool {
        self.decay.get(name).copied().unwrap_or(false)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.params.iter()
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(|v| v.as_slice())
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.buffers.get_mut(name)
    }

    pub fn set_buffer(&mut self, name: &str, value: Vec<f64>) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.buffers.iter()
    }

    /// Number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Fold batch statistics into running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.layer);
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .unwrap_or_else(|| panic!("missing buffer {key}"));
                for (r, b) in buf.iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }

    /// Check that the store holds exactly the declared tensors with the
    /// declared shapes.
    pub fn validate(&self, decl: &Declarations) -> Result<(), String> {
        for p in &decl.params {
            match self.params.get(&p.name) {
                None => return Err(format!("missing parameter {}", p.name)),
                Some(t) if t.shape() != p.shape => {
                    return Err(format!(
                        "parameter {} has shape {}, expected {}",
                        p.name,
                        t.shape(),
                        p.shape
                    ))
                }
                _ => {}
            }
        }
        for b in &decl.buffers {
            match self.buffers.get(&b.name) {
                Some(v) if v.len() == b.len => {}
                _ => return Err(format!("missing or malformed buffer {}", b.name)),
            }
        }
        if self.params.len() != decl.params.len() {
            return Err(format!(
                "store holds {} parameters, plan declares {}",
                self.params.len(),
                decl.params.len()
            ));
        }
        Ok(())
    }
}

/// Forward-pass context: the tape being recorded and the parameters read.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Ctx { g, store }
    }

    pub fn param(&mut self, name: &str) -> Var {
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not in store"))
            .clone();
        self.g.param(name, t)
    }

    fn buffer(&self, name: &str) -> &'a [f64] {
        self.store
            .buffer(name)
            .unwrap_or_else(|| panic!("buffer {name} not in store"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, stride: usize, bias: bool) -> Self {
        Conv {
            name: name.into(),
            in_c,
            out_c,
            k,
            stride,
            bias,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::same(self.k, self.stride)
    }

    pub fn declare(&self, d: &mut Declarations) {
        d.params.push(ParamSpec {
            name: format!("{}.weight", self.name),
            shape: Shape::new(self.out_c, self.in_c, self.k, self.k),
            init: Init::KaimingOut(self.out_c * self.k * self.k),
            decay: true,
        });
        if self.bias {
            d.params.push(ParamSpec {
                name: format!("{}.bias", self.name),
                shape: Shape::new(self.out_c, 1, 1, 1),
                init: Init::Zeros,
                decay: false,
            });
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let s = ctx.g.shape(x);
        assert_eq!(s.c, self.in_c, "{}: expected {} input channels, got {}", self.name, self.in_c, s.c);
        let w = ctx.param(&format!("{}.weight", self.name));
        let b = self.bias.then(|| ctx.param(&format!("{}.bias", self.name)));
        ctx.g.conv2d(x, w, b, self.geometry())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub c: usize,
}

impl BatchNorm {
    pub fn declare(&self, d: &mut Declarations) {
        for (suffix, init) in [("weight", Init::Ones), ("bias", Init::Zeros)] {
            d.params.push(ParamSpec {
                name: format!("{}.{suffix}", self.name),
                shape: Shape::new(self.c, 1, 1, 1),
                init,
                decay: false,
            });
        }
        for (suffix, fill) in [("running_mean", 0.0), ("running_var", 1.0)] {
            d.buffers.push(BufferSpec {
                name: format!("{}.{suffix}", self.name),
                len: self.c,
                fill,
            });
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let gamma = ctx.param(&format!("{}.weight", self.name));
        let beta = ctx.param(&format!("{}.bias", self.name));
        let mean = ctx.buffer(&format!("{}.running_mean", self.name));
        let var = ctx.buffer(&format!("{}.running_var", self.name));
        let (y, stats) = ctx.g.batch_norm(x, gamma, beta, (mean, var));
        if let Some((mean, var)) = stats {
            ctx.g.record_bn_update(BnUpdate {
                layer: self.name.clone(),
                mean,
                var,
            });
        }
        y
    }
}

/// Convolution, batch normalization, optional rectifier. Parameters live
/// under `<name>.conv` and `<name>.bn`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, relu: bool) -> Self {
        ConvBn {
            conv: Conv::new(format!("{name}.conv"), in_c, out_c, k, stride, false),
            bn: BatchNorm {
                name: format!("{name}.bn"),
                c: out_c,
            },
            relu,
        }
    }

    pub fn declare(&self, d: &mut Declarations) {
        self.conv.declare(d);
        self.bn.declare(d);
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.conv.forward(ctx, x);
        let y = self.bn.forward(ctx, y);
        if self.relu {
            ctx.g.relu(y)
        } else {
            y
        }
    }
}

/// Residual block: a chain of conv-bn layers (rectifier on all but the last),
/// a skip connection (projected when shape changes), and a rectifier after
/// the addition.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub layers: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    /// Two 3x3 convolutions; stride on the first.
    pub fn basic(name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        let layers = vec![
            ConvBn::new(&format!("{name}.conv1"), in_c, out_c, 3, stride, true),
            ConvBn::new(&format!("{name}.conv2"), out_c, out_c, 3, 1, false),
        ];
        Self::with_shortcut(name, layers, in_c, out_c, stride)
    }

    /// 1x1 reduce, 3x3 (carrying the stride), 1x1 expand.
    pub fn bottleneck(name: &str, in_c: usize, mid: usize, out_c: usize, stride: usize) -> Self {
        let layers = vec![
            ConvBn::new(&format!("{name}.conv1"), in_c, mid, 1, 1, true),
            ConvBn::new(&format!("{name}.conv2"), mid, mid, 3, stride, true),
            ConvBn::new(&format!("{name}.conv3"), mid, out_c, 1, 1, false),
        ];
        Self::with_shortcut(name, layers, in_c, out_c, stride)
    }

    fn with_shortcut(name: &str, layers: Vec<ConvBn>, in_c: usize, out_c: usize, stride: usize) -> Self {
        let shortcut = (in_c != out_c || stride != 1)
            .then(|| ConvBn::new(&format!("{name}.downsample"), in_c, out_c, 1, stride, false));
        ResidualBlock { layers, shortcut }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].conv.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("nonempty block").conv.out_c
    }

    pub fn declare(&self, d: &mut Declarations) {
        for l in &self.layers {
            l.declare(d);
        }
        if let Some(s) = &self.shortcut {
            s.declare(d);
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut y = x;
        for l in &self.layers {
            y = l.forward(ctx, y);
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(ctx, x),
            None => x,
        };
        let sum = ctx.g.add(y, skip);
        ctx.g.relu(sum)
    }
}

/// A seeded generator for places that need one without a caller-supplied
/// stream.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Uniform draw in `[0, 1)`; kept here so every module draws the same way.
pub fn uniform(r: &mut ChaCha8Rng) -> f64 {
    r.random::<f64>()
}
