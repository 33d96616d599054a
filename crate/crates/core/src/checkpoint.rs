//! Self-describing checkpoint archives.
//!
//! Layout: the 8 magic bytes `SPGNETCK`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor's
//! data as little-endian `f64` in index order. The header carries the plan,
//! its digest, the training configuration, the iteration count, an optional
//! embedded configuration document, and the tensor index.

use crate::assembly::{Network, NetworkPlan};
use crate::engine::{Sgd, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SPGNETCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Group {
    Param,
    Buffer,
    Momentum,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    group: Group,
    shape: Shape,
    offset: usize,
    #[serde(default)]
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    plan: NetworkPlan,
    plan_digest: String,
    train: TrainConfig,
    iteration: u64,
    config: Option<String>,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub plan: NetworkPlan,
    pub train: TrainConfig,
    pub iteration: u64,
    /// The configuration document the run was started from, if any.
    pub config: Option<String>,
    pub store: ParamStore,
    pub optimizer: Sgd,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: &str, group, shape: Shape, values: &[f64], decay| {
            tensors.push(Entry {
                name: name.to_string(),
                group,
                shape,
                offset: data.len(),
                decay,
            });
            data.extend_from_slice(values);
        };
        for (name, t) in self.store.iter() {
            push(name, Group::Param, t.shape(), t.data(), self.store.decays(name));
        }
        for (name, b) in self.store.buffers() {
            push(name, Group::Buffer, Shape::new(b.len(), 1, 1, 1), b, false);
        }
        for (name, t) in self.optimizer.momentum() {
            push(name, Group::Momentum, t.shape(), t.data(), false);
        }
        let header = Header {
            plan: self.plan.clone(),
            plan_digest: self.plan.digest(),
            train: self.train.clone(),
            iteration: self.iteration,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut bytes = Vec::with_capacity(20 + json.len() + data.len() * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(&e.to_string()))?;
        if header.plan.digest() != header.plan_digest {
            return Err(bad("plan digest does not match embedded plan"));
        }
        let raw = &bytes[body..];
        if raw.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut store = ParamStore::new();
        let mut momentum = BTreeMap::new();
        for e in &header.tensors {
            let end = e.offset + e.shape.len();
            if end > values.len() {
                return Err(bad(&format!("tensor {} extends past the data", e.name)));
            }
            let v = values[e.offset..end].to_vec();
            match e.group {
                Group::Param => store.insert(&e.name, Tensor::from_vec(e.shape, v), e.decay),
                Group::Buffer => store.set_buffer(&e.name, v),
                Group::Momentum => {
                    momentum.insert(e.name.clone(), Tensor::from_vec(e.shape, v));
                }
            }
        }
        let decl = Network::build(&header.plan)?.declarations();
        store.validate(&decl).map_err(|m| bad(&m))?;
        let optimizer = Sgd::with_momentum(header.train.momentum, header.train.weight_decay, momentum);
        Ok(Checkpoint {
            plan: header.plan,
            train: header.train,
            iteration: header.iteration,
            config: header.config,
            store,
            optimizer,
        })
    }

    /// Load and require the archive to hold `plan`.
    pub fn load_for(path: &Path, plan: &NetworkPlan) -> Result<Self> {
        let ck = Self::load(path)?;
        let (expected, found) = (plan.digest(), ck.plan.digest());
        if expected != found {
            return Err(Error::PlanMismatch { expected, found });
        }
        Ok(ck)
    }
}
