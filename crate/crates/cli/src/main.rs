//! `devignet` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use devignet_core::checkpoint::Checkpoint;
use devignet_core::data::{make_synthetic_dataset, SynthOptions};
use devignet_core::harness::{self, TrainConfig, Trainer, TRAIN_LOG};
use devignet_core::Error;
use serde_json::Value;

const SEED_ENV: &str = "DEVIGNET_SEED";
const DEFAULT_OUT_DIR: &str = "devignet-run";

#[derive(Parser, Debug)]
#[command(name = "devignet", version, about = "Vignetting removal with a Laplacian-pyramid network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic vignetted/clean pairs plus a manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Folder of clean images to vignette instead of procedural textures.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Train from a JSON configuration.
    Train {
        /// JSON file with TrainConfig fields; omitted fields keep defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` with a dotted key, e.g. `model.daft.channels=16`.
        /// Values are parsed as JSON, falling back to a plain string.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a paired dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Square evaluation sizes; native size when omitted.
        #[arg(long, value_delimiter = ',')]
        res: Vec<usize>,
        /// Write the full per-image report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Devignet one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write `<out stem>_grid.png` with input and output side by side.
        #[arg(long)]
        grid: bool,
    },
}

/// Error in how the tool was invoked rather than in the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        Some(Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override key {key}: {} is not a table", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| usage(format!("override key {key}: unknown field {part}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Ok(())
}

/// Config file, then `DEVIGNET_SEED`, then `--override` entries.
fn load_train_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed.parse().map_err(|_| usage(format!("{SEED_ENV}={seed} is not an integer")))?;
        cfg.seed = seed;
        cfg.model.seed = seed;
    }
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("override {item:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut tree, key.trim(), value)?;
    }
    serde_json::from_value(tree).map_err(|e| usage(format!("overrides: {e}")))
}

fn train(config: Option<&Path>, overrides: &[String], resume: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = load_train_config(config, overrides)?;
    let out_dir = cfg.out_dir.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT_DIR)).clone();
    let steps = cfg.steps;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(cfg, &Checkpoint::load(dir)?)?,
        None => Trainer::new(cfg)?,
    };
    println!("step,loss,lr");
    let lr = trainer.config().lr;
    while trainer.step() < steps {
        let next = trainer.step() + 1;
        trainer.run_until(next)?;
        let loss = trainer.losses().last().copied().unwrap_or(f64::NAN);
        println!("{next},{loss},{lr}");
    }
    let path = trainer.save_checkpoint()?.unwrap_or_else(|| out_dir.clone());
    eprintln!(
        "checkpoint at step {} written to {}; log in {}",
        trainer.step(),
        path.display(),
        out_dir.join(TRAIN_LOG).display()
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, res: &[usize], report: Option<&Path>) -> anyhow::Result<()> {
    if res.contains(&0) {
        bail!(usage("resolutions must be positive"));
    }
    let model = harness::load_model(ckpt)?;
    let results = harness::evaluate(&model, data, res)?;
    print!("{}", harness::format_results(&results));
    if let Some(path) = report {
        let json = serde_json::to_string_pretty(&results)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            n,
            size,
            seed,
            out,
            clean,
        } => {
            if n == 0 || size < 8 {
                bail!(usage("--n must be positive and --size at least 8"));
            }
            let opts = SynthOptions {
                n,
                size,
                seed,
                clean_dir: clean,
            };
            let manifest = make_synthetic_dataset(&opts, &out)?;
            println!("wrote {} pairs to {}", manifest.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            overrides,
            resume,
        } => train(config.as_deref(), &overrides, resume.as_deref()),
        Command::Eval { ckpt, data, res, report } => eval(&ckpt, &data, &res, report.as_deref()),
        Command::Infer { ckpt, input, out, grid } => {
            let model = harness::load_model(&ckpt)?;
            let img = harness::infer(&model, &input, &out, grid)?;
            println!("wrote {}x{} image to {}", img.height(), img.width(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
