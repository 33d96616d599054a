//! Inference strategies, multi-scale and flip fusion, and IoU metrics.

use crate::assembly::Network;
use crate::backbone::PoolingStrategy;
use crate::datapipe::{Dataset, Normalization};
use crate::error::{config, Result};
use crate::kernels;
use crate::nn::ParamStore;
use crate::profile::tile_offsets;
use crate::tensor::{LabelMap, Shape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    Gap,
    Tiled,
    Ap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalStrategy {
    #[serde(default)]
    pub kind: StrategyKind,
    #[serde(default = "d_crop")]
    pub crop: usize,
    #[serde(default = "d_overlap")]
    pub overlap_fraction: f64,
    #[serde(default = "d_scales")]
    pub scales: Vec<f64>,
    #[serde(default)]
    pub flip: bool,
}

fn d_crop() -> usize {
    769
}
fn d_overlap() -> f64 {
    1.0 / 3.0
}
fn d_scales() -> Vec<f64> {
    vec![1.0]
}

impl Default for EvalStrategy {
    fn default() -> Self {
        EvalStrategy {
            kind: StrategyKind::Gap,
            crop: d_crop(),
            overlap_fraction: d_overlap(),
            scales: d_scales(),
            flip: false,
        }
    }
}

impl EvalStrategy {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction < 1.0) {
            return config("overlap_fraction must lie in (0, 1)");
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0)) {
            return config("scales must be a nonempty list of positive values");
        }
        if self.kind == StrategyKind::Ap {
            PoolingStrategy::ap_kernel(self.crop)?;
        }
        if self.crop < 8 {
            return config("crop must be at least 8");
        }
        Ok(())
    }
}

/// Divide each pixel's class vector by its sum.
pub fn renormalize(p: &mut Tensor) {
    let s = p.shape();
    let plane = s.plane();
    for n in 0..s.n {
        for i in 0..plane {
            let sum: f64 = (0..s.c).map(|c| p.data()[(n * s.c + c) * plane + i]).sum();
            if sum > 0.0 {
                for c in 0..s.c {
                    p.data_mut()[(n * s.c + c) * plane + i] /= sum;
                }
            }
        }
    }
}

/// Per-pixel class probabilities at input resolution for a `1 x 3 x h x w`
/// image.
pub fn predict(network: &Network, store: &ParamStore, image: &Tensor, strategy: &EvalStrategy) -> Result<Tensor> {
    strategy.validate()?;
    let s = image.shape();
    match strategy.kind {
        StrategyKind::Gap => {
            let logits = network.predict_logits(store, image, PoolingStrategy::Gap)?;
            Ok(kernels::channel_softmax(&logits))
        }
        StrategyKind::Ap => {
            let pooling = PoolingStrategy::Ap { crop: strategy.crop };
            let logits = network.predict_logits(store, image, pooling)?;
            Ok(kernels::channel_softmax(&logits))
        }
        StrategyKind::Tiled => {
            let (th, tw) = (strategy.crop.min(s.h), strategy.crop.min(s.w));
            let ys = tile_offsets(s.h, th, strategy.overlap_fraction);
            let xs = tile_offsets(s.w, tw, strategy.overlap_fraction);
            let tiles: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
            let probs: Vec<Tensor> = tiles
                .par_iter()
                .map(|&(y, x)| {
                    let crop = image.crop(y, x, th, tw);
                    let logits = network.predict_logits(store, &crop, PoolingStrategy::Gap)?;
                    Ok(kernels::channel_softmax(&logits))
                })
                .collect::<Result<_>>()?;
            let c = network.plan.num_classes;
            let mut acc = Tensor::zeros(Shape::new(1, c, s.h, s.w));
            let mut cover = vec![0u32; s.plane()];
            for (&(y0, x0), p) in tiles.iter().zip(&probs) {
                for y in 0..th {
                    for x in 0..tw {
                        cover[(y0 + y) * s.w + x0 + x] += 1;
                        for k in 0..c {
                            let v = p.at(0, k, y, x);
                            let i = acc.index(0, k, y0 + y, x0 + x);
                            acc.data_mut()[i] += v;
                        }
                    }
                }
            }
            assert!(cover.iter().all(|&n| n > 0), "tiling left pixels uncovered");
            for k in 0..c {
                for (v, &n) in acc.plane_mut(0, k).iter_mut().zip(&cover) {
                    *v /= n as f64;
                }
            }
            Ok(acc)
        }
    }
}

/// Mean of the probability maps over every scale, and over mirrored inputs
/// when `flip` is set.
pub fn fuse_multi_scale_flip(network: &Network, store: &ParamStore, image: &Tensor, strategy: &EvalStrategy) -> Result<Tensor> {
    strategy.validate()?;
    let s = image.shape();
    let mut branches = Vec::new();
    for &scale in &strategy.scales {
        let h = ((s.h as f64 * scale).round() as usize).max(8);
        let w = ((s.w as f64 * scale).round() as usize).max(8);
        let scaled = if (h, w) == (s.h, s.w) {
            image.clone()
        } else {
            kernels::resize_bilinear(image, h, w)
        };
        let mut inputs = vec![(scaled.clone(), false)];
        if strategy.flip {
            inputs.push((scaled.flip_horizontal(), true));
        }
        for (input, flipped) in inputs {
            let mut p = predict(network, store, &input, strategy)?;
            if flipped {
                p = p.flip_horizontal();
            }
            if (h, w) != (s.h, s.w) {
                p = kernels::resize_bilinear(&p, s.h, s.w);
                renormalize(&mut p);
            }
            branches.push(p);
        }
    }
    let mut acc = branches[0].clone();
    for b in &branches[1..] {
        acc.add_assign(b);
    }
    let inv = 1.0 / branches.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    if branches.len() > 1 {
        renormalize(&mut acc);
    }
    Ok(acc)
}

/// Per-pixel argmax; ties go to the lower class index.
pub fn argmax(p: &Tensor) -> LabelMap {
    let s = p.shape();
    let plane = s.plane();
    let mut out = LabelMap::filled(s.n, s.h, s.w, 0);
    for n in 0..s.n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if p.data()[(n * s.c + c) * plane + i] > p.data()[(n * s.c + best) * plane + i] {
                    best = c;
                }
            }
            out.data[n * plane + i] = best as u8;
        }
    }
    out
}

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Count aligned pixels, skipping ground truth equal to `ignore` or
    /// outside the class range.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) {
        assert_eq!((pred.n, pred.h, pred.w), (gt.n, gt.h, gt.w), "label maps not aligned");
        for (&p, &t) in pred.data.iter().zip(&gt.data) {
            if t == ignore || t as usize >= self.classes {
                continue;
            }
            let p = (p as usize).min(self.classes - 1);
            self.counts[t as usize * self.classes + p] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class, `None` for classes absent from both prediction and truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        correct as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    pub pixel_accuracy: f64,
    pub samples: usize,
    pub strategy: EvalStrategy,
}

pub fn evaluate_dataset(
    network: &Network,
    store: &ParamStore,
    data: &Dataset,
    strategy: &EvalStrategy,
    norm: &Normalization,
    ignore: u8,
) -> Result<EvalReport> {
    let classes = network.plan.num_classes;
    let mut conf = ConfusionMatrix::new(classes);
    for i in 0..data.len() {
        let sample = data.get(i)?;
        let probs = fuse_multi_scale_flip(network, store, &norm.apply(&sample.image), strategy)?;
        conf.accumulate(&argmax(&probs), &sample.labels, ignore);
    }
    Ok(EvalReport {
        miou: conf.miou(),
        per_class_iou: conf.per_class_iou(),
        class_names: (0..classes).map(|c| data.class_name(c)).collect(),
        pixel_accuracy: conf.pixel_accuracy(),
        samples: data.len(),
        strategy: strategy.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_class_example() {
        let gt = LabelMap::new(1, 1, 4, vec![0, 0, 1, 2]);
        let pred = LabelMap::new(1, 1, 4, vec![0, 1, 1, 1]);
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&pred, &gt, 255);
        let iou = m.per_class_iou();
        // class 1: gt {2}, pred {1, 2, 3}
        assert_eq!(iou, vec![Some(0.5), Some(1.0 / 3.0), Some(0.0)]);
        assert!((m.miou() - 5.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let gt = LabelMap::new(1, 1, 2, vec![0, 0]);
        let mut m = ConfusionMatrix::new(4);
        m.accumulate(&gt, &gt, 255);
        assert_eq!(m.miou(), 1.0);
    }
}
