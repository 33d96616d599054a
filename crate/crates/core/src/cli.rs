//! Command-line dispatcher.
//!
//! Exit status: 0 on success, [`EXIT_CONFIG`] for usage and configuration
//! errors, [`EXIT_RUNTIME`] for failures while a workflow runs.

use crate::assembly::Network;
use crate::backbone::PoolingStrategy;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::datapipe::{load_rgb, synth_from_id, Dataset, LabelTable};
use crate::engine::{self, RunOutput, TrainState};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_dataset, StrategyKind};
use crate::profile::profile;
use crate::selftest;
use crate::visualize::{visualize, DEFAULT_TOP_K};
use clap::{Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "spgnet", about = "Multi-stage segmentation networks with guided attention links")]
struct Cli {
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Gap,
    Tiled,
    Ap,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Gap => StrategyKind::Gap,
            StrategyArg::Tiled => StrategyKind::Tiled,
            StrategyArg::Ap => StrategyKind::Ap,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network described by a configuration document.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        max_iter: Option<u64>,
        /// `dotted.key=value`, applied in order before the other flags.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint of the same plan.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        scales: Option<Vec<f64>>,
        #[arg(long)]
        flip: bool,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count parameters and multiply-accumulates symbolically.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_name = "HxW")]
        input_size: String,
        #[arg(long)]
        per_layer: bool,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Render attention overlays for one image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file, or a synthetic sample identifier.
        #[arg(long)]
        image: String,
        /// Class names or indices, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        class: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        topk: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::PlanMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `argv` (program name first) and run the selected workflow.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("input size {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Train {
            config,
            out: out_dir,
            data,
            max_iter,
            set,
            resume,
        } => {
            let mut overrides = set;
            if let Some(s) = cli.seed {
                overrides.push(format!("train.seed={s}"));
            }
            if let Some(m) = max_iter {
                overrides.push(format!("train.max_iter={m}"));
            }
            if let Some(d) = data {
                overrides.push(format!("paths.data_uri={}", toml_string(&d)));
            }
            if let Some(o) = out_dir {
                overrides.push(format!("paths.output_dir={}", toml_string(&o.to_string_lossy())));
            }
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            train_workflow(&cfg, resume.as_deref(), out)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            strategy,
            crop,
            scales,
            flip,
            out: report_path,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let embedded = match &ck.config {
                Some(doc) => Some(ExperimentConfig::parse(doc)?),
                None => None,
            };
            let mut strat = embedded.as_ref().map(|c| c.eval.clone()).unwrap_or_default();
            if let Some(k) = strategy {
                strat.kind = k.into();
            }
            if let Some(c) = crop {
                strat.crop = c;
            }
            if let Some(s) = scales {
                strat.scales = s;
            }
            strat.flip |= flip;
            strat.validate()?;
            let uri = data
                .or_else(|| embedded.as_ref().map(|c| c.paths.data_uri.clone()))
                .ok_or_else(|| Error::Config("no --data given and the checkpoint embeds no config".into()))?;
            let split = split
                .or_else(|| embedded.as_ref().map(|c| c.paths.eval_split.clone()))
                .unwrap_or_else(|| "val".into());
            let dataset = Dataset::open(&uri, &split)?;
            let net = Network::build(&ck.plan)?;
            let report = evaluate_dataset(
                &net,
                &ck.store,
                &dataset,
                &strat,
                &ck.train.normalization,
                ck.train.loss.ignore_label,
            )?;
            let text = to_json(&report);
            if let Some(p) = report_path {
                std::fs::write(p, &text)?;
            }
            writeln!(out, "{text}")?;
            Ok(0)
        }
        Command::Profile {
            config,
            input_size,
            per_layer,
            json,
        } => {
            let (h, w) = parse_size(&input_size)?;
            let cfg = ExperimentConfig::load(&config, &[])?;
            let pooling = match cfg.eval.kind {
                StrategyKind::Ap => PoolingStrategy::Ap { crop: cfg.eval.crop },
                _ => PoolingStrategy::Gap,
            };
            let report = profile(&cfg.network, h, w, pooling)?;
            if json {
                writeln!(out, "{}", to_json(&report))?;
            } else {
                write!(out, "{}", report.table(per_layer))?;
            }
            Ok(0)
        }
        Command::Visualize {
            checkpoint,
            image,
            class,
            topk,
            out: dir,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let net = Network::build(&ck.plan)?;
            let classes = class
                .iter()
                .map(|c| resolve_class(c, ck.plan.num_classes))
                .collect::<Result<Vec<_>>>()?;
            let img = if image.starts_with("synth-") {
                synth_from_id(&image)?.image
            } else {
                load_rgb(Path::new(&image))?
            };
            let written = visualize(&net, &ck.store, &img, &ck.train.normalization, &classes, topk, &dir)?;
            for p in written {
                writeln!(out, "{}", p.display())?;
            }
            Ok(0)
        }
        Command::Selftest => {
            let results = selftest::run();
            let passed = results.iter().filter(|r| r.passed).count();
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                writeln!(out, "{tag} {} ({})", r.name, r.detail)?;
            }
            writeln!(out, "{passed}/{} checks passed", results.len())?;
            Ok(if passed == results.len() { 0 } else { EXIT_RUNTIME })
        }
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// A class index, a Cityscapes train-id name, or `class<k>`.
fn resolve_class(s: &str, classes: usize) -> Result<usize> {
    let idx = if let Ok(i) = s.parse::<usize>() {
        Some(i)
    } else if let Some(i) = s.strip_prefix("class").and_then(|r| r.parse::<usize>().ok()) {
        Some(i)
    } else {
        LabelTable::cityscapes().class_index(s).map(usize::from)
    };
    match idx {
        Some(i) if i < classes => Ok(i),
        _ => Err(Error::Config(format!("unknown class {s:?} for {classes} classes"))),
    }
}

fn train_workflow(cfg: &ExperimentConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let data = Dataset::open(&cfg.paths.data_uri, &cfg.paths.train_split)?;
    if data.num_classes() != cfg.network.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, network predicts {}",
            data.num_classes(),
            cfg.network.num_classes
        )));
    }
    let net = Network::build(&cfg.network)?;
    let state = match resume {
        Some(p) => engine::resume(p, &cfg.network)?.0,
        None => TrainState::fresh(&net, &cfg.train),
    };
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    let document = cfg.to_toml();
    std::fs::write(dir.join("config.toml"), &document)?;
    let run = RunOutput {
        dir: Some(dir.clone()),
        config_document: Some(document),
    };
    let result = engine::train(&net, &data, &cfg.train, state, &run)?;
    let summary = serde_json::json!({
        "output_dir": dir,
        "config_digest": cfg.digest(),
        "iterations": result.state.iteration,
        "final_loss": result.log.last().map(|r| r.total_loss),
        "checkpoints": result.checkpoints,
    });
    writeln!(out, "{}", to_json(&summary))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1024x2048").unwrap(), (1024, 2048));
        assert!(parse_size("1024").is_err());
        assert!(parse_size("0x5").is_err());
    }

    #[test]
    fn classes() {
        assert_eq!(resolve_class("2", 4).unwrap(), 2);
        assert_eq!(resolve_class("class3", 4).unwrap(), 3);
        assert_eq!(resolve_class("road", 19).unwrap(), 0);
        assert!(resolve_class("9", 4).is_err());
    }
}
