//! Experiment configuration documents.
//!
//! Documents are TOML. A top-level `include = ["base.toml", ...]` pulls in
//! other documents (paths relative to the including file); tables merge
//! recursively, later values replacing earlier ones, and the including file
//! wins over what it includes. Overrides of the form `dotted.key=value` are
//! applied afterwards in the order given.

use crate::assembly::NetworkPlan;
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluate::EvalStrategy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use toml::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default = "d_data")]
    pub data_uri: String,
    #[serde(default = "d_out")]
    pub output_dir: String,
    #[serde(default = "d_train_split")]
    pub train_split: String,
    #[serde(default = "d_eval_split")]
    pub eval_split: String,
}

fn d_data() -> String {
    "synth://0/64/4/64".into()
}
fn d_out() -> String {
    "runs/default".into()
}
fn d_train_split() -> String {
    "train".into()
}
fn d_eval_split() -> String {
    "val".into()
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_uri: d_data(),
            output_dir: d_out(),
            train_split: d_train_split(),
            eval_split: d_eval_split(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkPlan,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalStrategy,
    #[serde(default)]
    pub paths: Paths,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Recursively merge `top` into `base`.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => deep_merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn load_value(path: &Path, depth: usize) -> Result<Value> {
    if depth > 16 {
        return Err(cfg_err(format!("include depth exceeded at {}", path.display())));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: Value = text
        .parse::<toml::Table>()
        .map(Value::Table)
        .map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
    let includes = match doc.as_table_mut().and_then(|t| t.remove("include")) {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                _ => Err(cfg_err("include entries must be strings")),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(cfg_err("include must be a string or list of strings")),
    };
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut merged = Value::Table(toml::Table::new());
    for inc in includes {
        deep_merge(&mut merged, load_value(&dir.join(inc), depth + 1)?);
    }
    deep_merge(&mut merged, doc);
    Ok(merged)
}

/// Parse `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Apply `a.b.c=value` to a document, creating tables as needed.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(format!("bad override key {key:?}")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("override {key:?} descends into a non-table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| cfg_err(format!("override {key:?} descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: ExperimentConfig = v.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v = text
            .parse::<toml::Table>()
            .map_err(|e| cfg_err(e.to_string()))?;
        Self::from_value(Value::Table(v))
    }

    /// Load a document with its includes, then apply overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut v = load_value(path, 0)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.train.loss.weights(self.network.stages.len())?;
        Ok(())
    }

    /// Canonical document form, embedded in checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.output_dir)
    }
}
