//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Graph`] records every operation of one forward pass. Node indices grow
//! monotonically, so reverse index order is a valid topological order for the
//! backward sweep.

use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Shape, Tensor};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running-statistics update produced by a batch-normalization layer in
/// training mode. Applied by the optimizer loop, never by the forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

enum Op {
    Input,
    Param(String),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        var: Vec<f64>,
        batch_statistics: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    SpatialSoftmax(Var),
    Add(Var, Var),
    /// `a + b` where `b` is `n x c x 1 x 1`, broadcast over space.
    AddSpatialBroadcast(Var, Var),
    Mul(Var, Var),
    /// `x * gate` where `gate` is `n x c x 1 x 1`.
    MulChannel(Var, Var),
    Scale(Var, f64),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ResizeBilinear(Var),
    ResizeNearest(Var),
    GlobalAvgPool(Var),
    SlidingAvgPool(Var, usize),
    BlockAvgPool(Var, usize),
    /// Scalar `sum_i weight_i * -log softmax(logits)_i[label_i]`.
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
    DotConst(Var, Tensor),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    bn_updates: Vec<BnUpdate>,
    macs: u64,
}

impl Graph {
    /// `train` selects batch statistics in normalization layers.
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
            bn_updates: Vec::new(),
            macs: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Multiply-accumulates executed by convolutions so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn record_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is wanted (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, name: &str, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Param(name.to_string()), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeometry) -> Var {
        let out = {
            let bias = b.map(|b| self.value(b));
            kernels::conv2d_forward(self.value(x), self.value(w), bias, g)
        };
        let in_c = self.shape(x).c;
        self.macs += kernels::conv2d_macs(in_c, out.shape(), g.kernel);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv { x, w, b, g }, rg)
    }

    /// Batch normalization. In training mode the batch statistics are used
    /// (and returned for the caller to fold into running averages); otherwise
    /// `running` supplies mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let xs = self.value(x);
        let (mean, var, batch_statistics) = if self.train {
            let st = kernels::batch_stats(xs);
            (st.mean, st.var, true)
        } else {
            (running.0.to_vec(), running.1.to_vec(), false)
        };
        let (y, xhat) = kernels::batch_norm_apply(
            xs,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let stats = batch_statistics.then(|| {
            let s = xs.shape();
            let m = (s.n * s.plane()) as f64;
            let unbiased = if m > 1.0 {
                var.iter().map(|v| v * m / (m - 1.0)).collect()
            } else {
                var.clone()
            };
            (mean.clone(), unbiased)
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                var,
                batch_statistics,
            },
            rg,
        );
        (v, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn spatial_softmax(&mut self, x: Var) -> Var {
        let y = kernels::spatial_softmax(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::SpatialSoftmax(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn add_spatial_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!((sb.n, sb.c, sb.h, sb.w), (sa.n, sa.c, 1, 1), "broadcast shape");
        let mut y = self.value(a).clone();
        let bv = self.value(b).data().to_vec();
        for n in 0..sa.n {
            for c in 0..sa.c {
                let add = bv[n * sa.c + c];
                y.plane_mut(n, c).iter_mut().for_each(|v| *v += add);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::AddSpatialBroadcast(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Mul(a, b), rg)
    }

    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Var {
        let (sx, sg) = (self.shape(x), self.shape(gate));
        assert_eq!((sg.n, sg.c, sg.h, sg.w), (sx.n, sx.c, 1, 1), "gate shape");
        let mut y = self.value(x).clone();
        let gv = self.value(gate).data().to_vec();
        for n in 0..sx.n {
            for c in 0..sx.c {
                let f = gv[n * sx.c + c];
                y.plane_mut(n, c).iter_mut().for_each(|v| *v *= f);
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        self.push(y, Op::MulChannel(x, gate), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, factor), rg)
    }

    pub fn max_pool_3x3s2(&mut self, x: Var) -> Var {
        let (y, argmax) = kernels::max_pool_3x3s2(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::MaxPool { x, argmax }, rg)
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        if (s.h, s.w) == (h, w) {
            return x;
        }
        let y = kernels::resize_bilinear(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(y, Op::ResizeBilinear(x), rg)
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        if (s.h, s.w) == (h, w) {
            return x;
        }
        let y = kernels::resize_nearest(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(y, Op::ResizeNearest(x), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = kernels::global_avg_pool(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::GlobalAvgPool(x), rg)
    }

    pub fn sliding_avg_pool(&mut self, x: Var, k: usize) -> Var {
        let y = kernels::sliding_avg_pool(self.value(x), k);
        let rg = self.rg(x);
        self.push(y, Op::SlidingAvgPool(x, k), rg)
    }

    pub fn block_avg_pool(&mut self, x: Var, k: usize) -> Var {
        let y = kernels::block_avg_pool(self.value(x), k);
        let rg = self.rg(x);
        self.push(y, Op::BlockAvgPool(x, k), rg)
    }

    /// `sum_i weights[i] * -log p_i[labels[i]]` over all pixels `i` of the
    /// batch (scanline order `n, y, x`). Pixels whose label is `None` must have
    /// zero weight.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<Option<usize>>, weights: Vec<f64>) -> Var {
        let s = self.shape(logits);
        assert_eq!(labels.len(), s.n * s.plane(), "label count");
        assert_eq!(weights.len(), labels.len(), "weight count");
        let probs = kernels::channel_softmax(self.value(logits));
        let p = s.plane();
        let mut loss = 0.0;
        for (i, (label, w)) in labels.iter().zip(&weights).enumerate() {
            if let Some(c) = label {
                if *w != 0.0 {
                    let (n, pix) = (i / p, i % p);
                    let prob = probs.data()[(n * s.c + c) * p + pix];
                    loss -= w * prob.max(f64::MIN_POSITIVE).ln();
                }
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            },
            rg,
        )
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut acc = 0.0;
        for (v, w) in &terms {
            assert_eq!(self.value(*v).len(), 1, "weighted_sum takes scalars");
            acc += w * self.value(*v).data()[0];
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(Tensor::vector(vec![acc]), Op::WeightedSum(terms), rg)
    }

    /// Scalar `sum(x * t)` for a constant `t`.
    pub fn dot_const(&mut self, x: Var, t: Tensor) -> Var {
        let v = self.value(x).dot(&t);
        let rg = self.rg(x);
        self.push(Tensor::vector(vec![v]), Op::DotConst(x, t), rg)
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::vector(vec![1.0]).reshape(self.shape(root)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, g: geo } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        b.is_some(),
                        self.rg(*x),
                        *geo,
                        &g,
                    );
                    if self.rg(*x) {
                        acc(*x, cg.input, &mut grads);
                    }
                    acc(*w, cg.weight, &mut grads);
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    var,
                    batch_statistics,
                } => {
                    let bg = kernels::batch_norm_backward(
                        &g,
                        xhat,
                        var,
                        self.value(*gamma).data(),
                        *batch_statistics,
                    );
                    acc(*x, bg.input, &mut grads);
                    acc(*gamma, Tensor::vector(bg.gamma), &mut grads);
                    acc(*beta, Tensor::vector(bg.beta), &mut grads);
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let t = g.zip_map(y, |gv, yv| if yv > 0.0 { gv } else { 0.0 });
                    acc(*x, t, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let t = g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv));
                    acc(*x, t, &mut grads);
                }
                Op::SpatialSoftmax(x) => {
                    let t = kernels::spatial_softmax_backward(&node.value, &g);
                    acc(*x, t, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddSpatialBroadcast(a, b) => {
                    let s = g.shape();
                    let mut gb = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
                    for n in 0..s.n {
                        for c in 0..s.c {
                            gb.set(n, c, 0, 0, g.plane(n, c).iter().sum());
                        }
                    }
                    acc(*b, gb, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |p, q| p * q);
                    let gb = g.zip_map(self.value(*a), |p, q| p * q);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::MulChannel(x, gate) => {
                    let s = g.shape();
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let mut gx = g.clone();
                    let mut gg = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let f = gv.at(n, c, 0, 0);
                            let dot: f64 = g
                                .plane(n, c)
                                .iter()
                                .zip(xv.plane(n, c))
                                .map(|(a, b)| a * b)
                                .sum();
                            gg.set(n, c, 0, 0, dot);
                            gx.plane_mut(n, c).iter_mut().for_each(|v| *v *= f);
                        }
                    }
                    acc(*x, gx, &mut grads);
                    acc(*gate, gg, &mut grads);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    acc(*x, g.map(|v| v * f), &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (o, &i) in argmax.iter().enumerate() {
                        gx.data_mut()[i] += g.data()[o];
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::ResizeBilinear(x) => {
                    let s = self.shape(*x);
                    acc(*x, kernels::resize_bilinear_backward(&g, s.h, s.w), &mut grads);
                }
                Op::ResizeNearest(x) => {
                    let s = self.shape(*x);
                    acc(*x, kernels::resize_nearest_backward(&g, s.h, s.w), &mut grads);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let mut gx = Tensor::zeros(s);
                    let inv = 1.0 / s.plane() as f64;
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let v = g.at(n, c, 0, 0) * inv;
                            gx.plane_mut(n, c).iter_mut().for_each(|d| *d = v);
                        }
                    }
                    acc(*x, gx, &mut grads);
                }
                Op::SlidingAvgPool(x, k) => {
                    acc(*x, kernels::sliding_avg_pool_backward(&g, *k), &mut grads);
                }
                Op::BlockAvgPool(x, k) => {
                    let s = self.shape(*x);
                    acc(*x, kernels::block_avg_pool_backward(&g, *k, s.h, s.w), &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let scale = g.data()[0];
                    let s = probs.shape();
                    let p = s.plane();
                    let mut gl = Tensor::zeros(s);
                    for (i, (label, w)) in labels.iter().zip(weights).enumerate() {
                        let Some(label) = label else { continue };
                        if *w == 0.0 {
                            continue;
                        }
                        let (n, pix) = (i / p, i % p);
                        for c in 0..s.c {
                            let k = (n * s.c + c) * p + pix;
                            let target = if c == *label { 1.0 } else { 0.0 };
                            gl.data_mut()[k] = scale * w * (probs.data()[k] - target);
                        }
                    }
                    acc(*logits, gl, &mut grads);
                }
                Op::WeightedSum(terms) => {
                    let gv = g.data()[0];
                    for (v, w) in terms {
                        let s = self.shape(*v);
                        acc(*v, Tensor::full(s, gv * w), &mut grads);
                    }
                }
                Op::DotConst(x, t) => {
                    let gv = g.data()[0];
                    acc(*x, t.map(|v| v * gv), &mut grads);
                }
            }
        }

        let mut params = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Param(name) => match params.get_mut(name) {
                    Some(existing) => Tensor::add_assign(existing, &g),
                    None => {
                        params.insert(name.clone(), g);
                    }
                },
                Op::Input => {
                    inputs.insert(idx, g);
                }
                _ => {}
            }
        }
        Gradients { params, inputs }
    }
}

pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }
}
