//! The `trdetr` command-line tool: synthetic data, training, evaluation,
//! prediction, gradient checks and λ_lg sweeps.
//!
//! Logs go to standard error; JSON results go to standard output or the
//! `--out` file. Exit codes: 0 success, 1 usage/validation/config error,
//! 2 internal error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::info;
use serde_json::Value;

use trdetr::checkpoint::{load_checkpoint, save_checkpoint};
use trdetr::data::synth::{synth_generate, SynthConfig};
use trdetr::data::{load_dir, save_dir};
use trdetr::gradcheck::run_gradcheck;
use trdetr::metrics::{evaluate, read_predictions, write_predictions};
use trdetr::trainer::{evaluate_model, predict, sweep_lambda, train, TrainConfig};
use trdetr::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "trdetr", version, about = "Joint moment retrieval and highlight detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset (annotations.jsonl + features/).
    Synth {
        /// Synthetic-data config (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset, or a prediction file with --preds.
    Eval {
        #[arg(long, required_unless_present = "preds")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score an existing prediction file instead of running the model.
        #[arg(long, conflicts_with = "ckpt")]
        preds: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-query predictions as JSON Lines.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every kernel and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        kernel_seeds: usize,
        #[arg(long, default_value_t = 5)]
        e2e_seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per λ_lg value and tabulate their metrics.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Held-out data; defaults to the config's eval_data, then to --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => {
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command. `Ok(false)` means the command completed but reports a
/// failed check.
pub fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { config, seed, out } => {
            let cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            let ds = synth_generate(&cfg, seed)?;
            save_dir(&ds, &out)?;
            info!("wrote {} samples to {}", ds.len(), out.display());
            emit(&serde_json::json!({ "samples": ds.len(), "out": out }), None)?;
        }
        Command::Train { config, data, out, seed } => {
            let cfg = load_train_config(&config, seed)?;
            let ds = load_dir(&data)?;
            let t = train::<f64>(&cfg, &ds)?;
            save_checkpoint(&out, &t.checkpoint())?;
            info!("saved checkpoint to {}", out.display());
            emit(
                &serde_json::json!({ "steps": t.step, "final_loss": t.history.last() }),
                None,
            )?;
        }
        Command::Eval { ckpt, data, preds, out } => {
            let ds = load_dir(&data)?;
            let report = match (ckpt, preds) {
                (_, Some(p)) => {
                    let file = fs::File::open(&p).map_err(|e| Error::Load(format!("{}: {e}", p.display())))?;
                    let preds = read_predictions(BufReader::new(file))?;
                    let samples: Vec<_> = ds.queries().cloned().collect();
                    // A prediction file that does not cover the dataset is bad input.
                    evaluate(&preds, &samples).map_err(|e| match e {
                        Error::Contract(m) => Error::Config(format!("{}: {m}", p.display())),
                        e => e,
                    })?
                }
                (Some(c), None) => evaluate_model(&load_checkpoint::<f64>(&c)?.model, &ds)?,
                (None, None) => unreachable!("clap requires --ckpt or --preds"),
            };
            emit(&serde_json::to_value(report)?, out.as_deref())?;
        }
        Command::Predict { ckpt, data, out } => {
            let model = load_checkpoint::<f64>(&ckpt)?.model;
            let ds = load_dir(&data)?;
            let preds = predict(&model, &ds)?;
            let file = fs::File::create(&out)?;
            let mut w = io::BufWriter::new(file);
            write_predictions(&preds, &mut w)?;
            w.flush()?;
            info!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Gradcheck { seed, kernel_seeds, e2e_seeds, out } => {
            let report = run_gradcheck(seed, kernel_seeds, e2e_seeds)?;
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
            return Ok(report.passed);
        }
        Command::Sweep { config, data, eval_data, lambdas, out, seed } => {
            let cfg = load_train_config(&config, seed)?;
            let train_set = load_dir(&data)?;
            let eval_set = match eval_data.or_else(|| cfg.eval_data.clone()) {
                Some(p) => load_dir(&p)?,
                None => train_set.clone(),
            };
            let rows = sweep_lambda::<f64>(&cfg, &train_set, &eval_set, &lambdas)?;
            emit(&serde_json::to_value(rows)?, out.as_deref())?;
        }
    }
    Ok(true)
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
        }
    };
    match execute(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            EXIT_INTERNAL
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_INTERNAL
            }
        }
    }
}
