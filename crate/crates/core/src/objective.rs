//! Segmentation loss with ignore labels and hard-pixel mining, plus the
//! poly learning-rate schedule.

use crate::error::{config, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::{LabelMap, Shape, Tensor};
use serde::{Deserialize, Serialize};

pub const IGNORE_LABEL: u8 = 255;

/// Reference minimum kept count at full scale: batch 8 of 769x769 crops.
const FULL_SCALE_MIN_KEPT: f64 = 1e5;
const FULL_SCALE_PIXELS: f64 = 8.0 * 769.0 * 769.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    #[serde(default)]
    pub mode: OhemMode,
    #[serde(default = "default_threshold")]
    pub keep_threshold: f64,
    /// `None` scales the full-resolution default by the supervised pixel count.
    #[serde(default)]
    pub min_kept: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OhemMode {
    /// Threshold on the true-class probability with a `min_kept` floor.
    #[default]
    Threshold,
    /// Exactly the `min_kept` hardest pixels.
    TopK,
}

fn default_threshold() -> f64 {
    0.7
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            mode: OhemMode::Threshold,
            keep_threshold: default_threshold(),
            min_kept: None,
        }
    }
}

impl OhemConfig {
    pub fn min_kept_for(&self, supervised: usize) -> usize {
        match self.min_kept {
            Some(k) => k,
            None => (FULL_SCALE_MIN_KEPT * supervised as f64 / FULL_SCALE_PIXELS).ceil() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// One weight per stage; empty means 1.0 for every stage.
    #[serde(default)]
    pub stage_weights: Vec<f64>,
    #[serde(default = "default_ignore")]
    pub ignore_label: u8,
    #[serde(default)]
    pub ohem: Option<OhemConfig>,
}

fn default_ignore() -> u8 {
    IGNORE_LABEL
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            stage_weights: Vec::new(),
            ignore_label: IGNORE_LABEL,
            ohem: None,
        }
    }
}

impl LossConfig {
    pub fn weights(&self, stages: usize) -> Result<Vec<f64>> {
        if self.stage_weights.is_empty() {
            return Ok(vec![1.0; stages]);
        }
        if self.stage_weights.len() != stages {
            return config(format!(
                "{} stage weights given for {stages} stages",
                self.stage_weights.len()
            ));
        }
        if self.stage_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return config("stage weights must be finite and nonnegative");
        }
        Ok(self.stage_weights.clone())
    }
}

/// Per-pixel class targets, `None` where ignored. Rejects labels outside
/// `[0, classes)` other than the ignore value.
pub fn targets(labels: &LabelMap, classes: usize, ignore: u8) -> Result<Vec<Option<usize>>> {
    labels
        .data
        .iter()
        .map(|&l| {
            if l == ignore {
                Ok(None)
            } else if (l as usize) < classes {
                Ok(Some(l as usize))
            } else {
                Err(Error::Data(format!("label {l} outside [0, {classes})")))
            }
        })
        .collect()
}

fn check_aligned(s: Shape, labels: &LabelMap) -> Result<()> {
    if (s.n, s.h, s.w) != (labels.n, labels.h, labels.w) {
        return Err(Error::Shape(format!(
            "logits {s} do not align with labels {}x{}x{}",
            labels.n, labels.h, labels.w
        )));
    }
    Ok(())
}

/// Per-pixel loss (zero where ignored, shape `n x 1 x h x w`) and its mean
/// over supervised pixels.
pub fn cross_entropy_ignore(logits: &Tensor, labels: &LabelMap, ignore: u8) -> Result<(Tensor, f64)> {
    let s = logits.shape();
    check_aligned(s, labels)?;
    let t = targets(labels, s.c, ignore)?;
    let probs = kernels::channel_softmax(logits);
    let p = s.plane();
    let mut loss = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, target) in t.iter().enumerate() {
        if let Some(c) = target {
            let (n, pix) = (i / p, i % p);
            let v = -probs.data()[(n * s.c + c) * p + pix].max(f64::MIN_POSITIVE).ln();
            loss.data_mut()[i] = v;
            total += v;
            count += 1;
        }
    }
    let mean = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, mean))
}

/// Probability of the true class at each pixel, `None` where ignored.
pub fn true_class_probs(logits: &Tensor, targets: &[Option<usize>]) -> Vec<Option<f64>> {
    let s = logits.shape();
    let probs = kernels::channel_softmax(logits);
    let p = s.plane();
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| t.map(|c| probs.data()[((i / p) * s.c + c) * p + i % p]))
        .collect()
}

/// Keep every supervised pixel whose true-class probability is below
/// `keep_threshold`; if fewer than `min_kept` qualify, keep the `min_kept`
/// lowest instead, ties going to the earlier pixel.
pub fn ohem_select(true_prob: &[Option<f64>], keep_threshold: f64, min_kept: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = true_prob
        .iter()
        .map(|p| p.is_some_and(|v| v < keep_threshold))
        .collect();
    let qualifying = keep.iter().filter(|&&k| k).count();
    let supervised: Vec<(usize, f64)> = true_prob
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|v| (i, v)))
        .collect();
    let floor = min_kept.min(supervised.len());
    if qualifying < floor {
        let mut order = supervised;
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        keep.iter_mut().for_each(|k| *k = false);
        for &(i, _) in &order[..floor] {
            keep[i] = true;
        }
    }
    keep
}

/// The `k` supervised pixels with the lowest true-class probability, ties
/// going to the earlier pixel.
pub fn ohem_top_k(true_prob: &[Option<f64>], k: usize) -> Vec<bool> {
    let mut order: Vec<(usize, f64)> = true_prob
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|v| (i, v)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut keep = vec![false; true_prob.len()];
    for &(i, _) in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

pub struct StageLosses {
    pub total: Var,
    /// Mean cross-entropy of each stage before weighting; `None` for
    /// unsupervised stages.
    pub per_stage: Vec<Option<f64>>,
}

/// Weighted sum over supervised stages of the (optionally mined) mean
/// cross-entropy of logits upsampled to label resolution.
pub fn multi_stage_loss(
    g: &mut Graph,
    per_stage_logits: &[Var],
    supervised: &[bool],
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<StageLosses> {
    let weights = cfg.weights(per_stage_logits.len())?;
    if supervised.len() != per_stage_logits.len() {
        return config("supervision flags do not match stage count");
    }
    let mut terms = Vec::new();
    let mut per_stage = Vec::new();
    for ((&logits, &sup), &w) in per_stage_logits.iter().zip(supervised).zip(&weights) {
        if !sup {
            per_stage.push(None);
            continue;
        }
        let up = g.resize_bilinear(logits, labels.h, labels.w);
        let s = g.shape(up);
        check_aligned(s, labels)?;
        let t = targets(labels, s.c, cfg.ignore_label)?;
        let keep: Vec<bool> = match &cfg.ohem {
            Some(o) => {
                let probs = true_class_probs(g.value(up), &t);
                let supervised_count = t.iter().filter(|x| x.is_some()).count();
                let k = o.min_kept_for(supervised_count);
                match o.mode {
                    OhemMode::Threshold => ohem_select(&probs, o.keep_threshold, k),
                    OhemMode::TopK => ohem_top_k(&probs, k),
                }
            }
            None => t.iter().map(Option::is_some).collect(),
        };
        let kept = keep.iter().filter(|&&k| k).count();
        let scale = if kept == 0 { 0.0 } else { 1.0 / kept as f64 };
        let pixel_weights = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let ce = g.cross_entropy(up, t, pixel_weights);
        per_stage.push(Some(g.value(ce).data()[0]));
        terms.push((ce, w));
    }
    let total = g.weighted_sum(terms);
    Ok(StageLosses { total, per_stage })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub max_iter: u64,
    #[serde(default = "default_power")]
    pub power: f64,
}

fn default_power() -> f64 {
    0.9
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.power > 0.0 && self.power <= 1.0) {
            return config("schedule needs base_lr > 0 and 0 < power <= 1");
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return config(format!("iteration {iter} beyond max_iter {}", cfg.max_iter));
    }
    if cfg.max_iter == 0 {
        return Ok(cfg.base_lr);
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.power))
}
