//! Training loop: SGD with momentum, poly schedule, checkpoints, metric log.

use crate::assembly::{Network, NetworkPlan};
use crate::backbone::PoolingStrategy;
use crate::checkpoint::Checkpoint;
use crate::datapipe::{augment, AugmentConfig, Dataset, Normalization};
use crate::error::{config, Error, Result};
use crate::graph::Graph;
use crate::nn::{self, Ctx, ParamStore};
use crate::objective::{multi_stage_loss, poly_lr, LossConfig, ScheduleConfig};
use crate::tensor::{LabelMap, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_max_iter")]
    pub max_iter: u64,
    #[serde(default = "d_power")]
    pub power: f64,
    #[serde(default)]
    pub seed: u64,
    /// 0 writes checkpoints only at the start and the end.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub normalization: Normalization,
}

fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}
fn d_max_iter() -> u64 {
    80_000
}
fn d_power() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: d_batch(),
            base_lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            max_iter: d_max_iter(),
            power: d_power(),
            seed: 0,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            max_iter: self.max_iter,
            power: self.power,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return config("momentum and weight_decay must be nonnegative");
        }
        self.schedule().validate()?;
        self.augment.scale_grid()?;
        if self.augment.crop < 8 {
            return config("crop must be at least 8");
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v = mu * v + g + wd * p` (decay on flagged tensors only),
/// then `p -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self::with_momentum(momentum, weight_decay, BTreeMap::new())
    }

    pub fn with_momentum(momentum: f64, weight_decay: f64, buffers: BTreeMap<String, Tensor>) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn momentum(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, g) in grads {
            let decay = if store.decays(name) { self.weight_decay } else { 0.0 };
            let p = store.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown {name}"));
            let v = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let mu = self.momentum;
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                *vi = mu * *vi + gi + decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    pub total_loss: f64,
    pub stage_losses: Vec<Option<f64>>,
}

pub struct TrainState {
    pub iteration: u64,
    pub store: ParamStore,
    pub optimizer: Sgd,
}

impl TrainState {
    pub fn fresh(network: &Network, cfg: &TrainConfig) -> Self {
        TrainState {
            iteration: 0,
            store: network.init_params(cfg.seed),
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
        }
    }
}

/// Where a run writes its artefacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Embedded in every checkpoint.
    pub config_document: Option<String>,
}

pub struct TrainResult {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Deterministic batch sampling: sample `j` of the run is position
/// `j mod len` of the permutation of epoch `j div len`.
struct Sampler {
    seed: u64,
    len: usize,
    perms: BTreeMap<u64, Vec<usize>>,
}

const PERM_SALT: u64 = 0x5eed_0f_5a4d_1e5;

impl Sampler {
    fn index(&mut self, j: u64) -> usize {
        let epoch = j / self.len as u64;
        let (seed, len) = (self.seed, self.len);
        let perm = self.perms.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..len).collect();
            p.shuffle(&mut nn::rng(seed ^ PERM_SALT, epoch));
            p
        });
        perm[(j % len as u64) as usize]
    }
}

/// Build batch `iteration`: augmented, normalized samples and their labels.
pub fn make_batch(data: &Dataset, cfg: &TrainConfig, iteration: u64) -> Result<(Tensor, LabelMap)> {
    let mut sampler = Sampler {
        seed: cfg.seed,
        len: data.len(),
        perms: BTreeMap::new(),
    };
    batch_with(&mut sampler, data, cfg, iteration)
}

fn batch_with(sampler: &mut Sampler, data: &Dataset, cfg: &TrainConfig, iteration: u64) -> Result<(Tensor, LabelMap)> {
    let mut images = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for b in 0..cfg.batch_size {
        let j = iteration * cfg.batch_size as u64 + b as u64;
        let sample = data.get(sampler.index(j))?;
        let aug = augment(&sample, &cfg.augment, &mut nn::rng(cfg.seed, j))?;
        images.push(cfg.normalization.apply(&aug.image));
        labels.push(aug.labels);
    }
    Ok((Tensor::stack(&images), LabelMap::stack(&labels)))
}

fn append_log(path: &Path, rec: &LogRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn write_checkpoint(
    dir: &Path,
    plan: &NetworkPlan,
    cfg: &TrainConfig,
    out: &RunOutput,
    state: &TrainState,
) -> Result<PathBuf> {
    let path = dir.join(format!("ckpt_{:08}.spg", state.iteration));
    Checkpoint {
        plan: plan.clone(),
        train: cfg.clone(),
        iteration: state.iteration,
        config: out.config_document.clone(),
        store: state.store.clone(),
        optimizer: state.optimizer.clone(),
    }
    .save(&path)?;
    Ok(path)
}

/// Train from `state` (fresh or resumed) up to `cfg.max_iter`.
pub fn train(
    network: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mut state: TrainState,
    out: &RunOutput,
) -> Result<TrainResult> {
    cfg.validate()?;
    let plan = &network.plan;
    if data.is_empty() {
        return config("training data is empty");
    }
    if data.num_classes() > plan.num_classes {
        return config(format!(
            "dataset has {} classes, network predicts {}",
            data.num_classes(),
            plan.num_classes
        ));
    }
    let schedule = cfg.schedule();
    let log_path = out.dir.as_ref().map(|d| d.join("metrics.jsonl"));
    if let Some(d) = &out.dir {
        std::fs::create_dir_all(d)?;
    }
    let mut checkpoints = Vec::new();
    if let (Some(d), 0) = (&out.dir, state.iteration) {
        checkpoints.push(write_checkpoint(d, plan, cfg, out, &state)?);
    }
    let mut sampler = Sampler {
        seed: cfg.seed,
        len: data.len(),
        perms: BTreeMap::new(),
    };
    let mut log = Vec::new();
    while state.iteration < cfg.max_iter {
        let it = state.iteration;
        let lr = poly_lr(it, &schedule)?;
        let (images, labels) = batch_with(&mut sampler, data, cfg, it)?;
        let mut g = Graph::new(true);
        let x = g.input(images);
        let fwd = {
            let mut ctx = Ctx::new(&mut g, &state.store);
            network.forward(&mut ctx, x, PoolingStrategy::Gap)?
        };
        let losses = multi_stage_loss(&mut g, &fwd.per_stage_logits, &fwd.supervised, &labels, &cfg.loss)?;
        let total = g.value(losses.total).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let grads = g.backward(losses.total).into_params();
        let updates = g.take_bn_updates();
        drop(g);
        state.optimizer.step(&mut state.store, &grads, lr);
        state.store.apply_bn_updates(&updates);
        state.iteration += 1;
        let rec = LogRecord {
            iteration: it,
            lr,
            total_loss: total,
            stage_losses: losses.per_stage,
        };
        if let Some(p) = &log_path {
            append_log(p, &rec)?;
        }
        log.push(rec);
        let due = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
        if let (Some(d), true) = (&out.dir, due || state.iteration == cfg.max_iter) {
            checkpoints.push(write_checkpoint(d, plan, cfg, out, &state)?);
        }
    }
    Ok(TrainResult {
        state,
        log,
        checkpoints,
    })
}

/// Resume state from a checkpoint written by [`train`].
pub fn resume(path: &Path, plan: &NetworkPlan) -> Result<(TrainState, TrainConfig)> {
    let ck = Checkpoint::load_for(path, plan)?;
    Ok((
        TrainState {
            iteration: ck.iteration,
            store: ck.store,
            optimizer: ck.optimizer,
        },
        ck.train,
    ))
}
