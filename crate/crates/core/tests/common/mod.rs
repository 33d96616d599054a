//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spgnet::assembly::NetworkPlan;
use spgnet::attention::{LinkSpec, SpgConfig, SpgVariant};
use spgnet::backbone::{EncoderSpec, Ratio};
use spgnet::decoder::DecoderSpec;
use spgnet::nn::{Declarations, ParamStore};
use spgnet::tensor::{LabelMap, Shape, Tensor};
use std::collections::BTreeSet;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec(shape, (0..shape.len()).map(|_| r.random_range(-1.0..1.0)).collect())
}

pub fn eighth() -> Ratio {
    Ratio::new(1, 8).unwrap()
}

pub fn spg(variant: SpgVariant) -> LinkSpec {
    LinkSpec::Spg(SpgConfig {
        variant,
        ..SpgConfig::default()
    })
}

/// Width-1/8 ResNet-18 stages with a small decoder.
pub fn tiny_plan(stages: usize, d: usize, classes: usize, link: LinkSpec) -> NetworkPlan {
    NetworkPlan::uniform(stages, EncoderSpec::new(18, eighth()), DecoderSpec::upsample(d), link, classes)
}

pub fn store_for(decl: &Declarations, seed: u64) -> ParamStore {
    ParamStore::initialize(decl, seed)
}

pub fn zero_param(store: &mut ParamStore, name: &str) {
    store
        .get_mut(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
}

/// IoU per class from pixel index sets; `None` when the union is empty.
pub fn miou_oracle(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> (Vec<Option<f64>>, f64) {
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != ignore && (gt[i] as usize) < classes).collect();
    let ious: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let p: BTreeSet<usize> = valid.iter().copied().filter(|&i| pred[i] as usize == c).collect();
            let g: BTreeSet<usize> = valid.iter().copied().filter(|&i| gt[i] as usize == c).collect();
            let union = p.union(&g).count();
            (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (ious, mean)
}

/// Sort every supervised pixel by (probability, index) and keep the prefix
/// that satisfies the threshold rule with its floor.
pub fn ohem_oracle(probs: &[Option<f64>], threshold: f64, min_kept: usize) -> Vec<bool> {
    let mut all: Vec<(f64, usize)> = probs.iter().enumerate().filter_map(|(i, p)| p.map(|p| (p, i))).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let below = all.iter().take_while(|(p, _)| *p < threshold).count();
    let keep_n = below.max(min_kept.min(all.len()));
    let mut keep = vec![false; probs.len()];
    for &(_, i) in &all[..keep_n] {
        keep[i] = true;
    }
    keep
}

pub fn random_labels(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize, classes: usize, ignore_rate: f64) -> LabelMap {
    let data = (0..n * h * w)
        .map(|_| {
            if r.random::<f64>() < ignore_rate {
                255
            } else {
                r.random_range(0..classes) as u8
            }
        })
        .collect();
    LabelMap::new(n, h, w, data)
}
