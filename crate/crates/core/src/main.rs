//! Command-line front end: train and evaluate the two-stream encoder,
//! audit FLOP costs, inspect checkpoints, and dump synthetic datasets.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or input problems,
//! 2 for numeric failures and corrupt checkpoints.

use adattn::harness::checkpoint::read_checkpoint;
use adattn::harness::flops::{FlopReport, FlopShape, SpanWidths};
use adattn::harness::train::{eval_examples, evaluate, train, TRAIN_STREAM};
use adattn::harness::TrainConfig;
use adattn::model::{Census, Encoder};
use adattn::synth::{generate_lookup, read_jsonl, write_jsonl};
use adattn::{Error, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "adattn", version, about = "Adaptive attention trainer and cost auditor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv and model.ckpt to --out.
    Train {
        /// JSON training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// JSONL examples replacing the synthetic training stream.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on freshly generated held-out examples.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed for the evaluation examples.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of evaluation examples.
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Report the analytic FLOP cost of one forward pass.
    Flops {
        /// JSON training configuration describing the model shape.
        #[arg(long)]
        config: PathBuf,
        /// Cost span mechanisms at their current (initial) spans instead
        /// of full width.
        #[arg(long)]
        span_aware: bool,
        /// Cost the deterministically pruned layer set and report the
        /// saving against the full one.
        #[arg(long)]
        pruned: bool,
    },
    /// Print a checkpoint's learned state as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write synthetic training examples as JSONL.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Output file path.
        #[arg(long)]
        out: PathBuf,
        /// Optional config fixing the task shape; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct FlopsOut {
    mechanism: &'static str,
    span_aware: bool,
    executed: String,
    report: FlopReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    full_total: Option<u64>,
    /// Fraction of the full-execution cost removed by pruning.
    #[serde(skip_serializing_if = "Option::is_none")]
    reduction: Option<f64>,
}

#[derive(Serialize)]
struct InspectOut {
    mechanism: &'static str,
    census: Census,
    #[serde(skip_serializing_if = "Option::is_none")]
    spans: Option<serde_json::Map<String, serde_json::Value>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alphas: Option<serde_json::Map<String, serde_json::Value>>,
    flops: FlopReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pruned_flops: Option<FlopReport>,
}

#[derive(Serialize)]
struct GenDataOut {
    seed: u64,
    count: usize,
    path: String,
}

fn to_json_map(pairs: Vec<(String, f64)>) -> Option<serde_json::Map<String, serde_json::Value>> {
    if pairs.is_empty() {
        return None;
    }
    let mut map = serde_json::Map::new();
    for (k, v) in pairs {
        map.insert(k, serde_json::json!(v));
    }
    Some(map)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{text}") {
        // The reader went away (a closed pipe); nothing is owed to it.
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        return Err(e.into());
    }
    Ok(())
}

/// Rebuild the model a checkpoint was trained as, with its parameters.
fn load_model(path: &PathBuf) -> Result<(TrainConfig, Encoder)> {
    let (config, params) = read_checkpoint(path)?;
    let enc = Encoder::new(config.encoder_config())?;
    enc.registry.unflatten(&params)?;
    Ok((config, enc))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, data } => {
            let config = TrainConfig::load(&config)?;
            let examples = match data {
                Some(path) => Some(read_jsonl(BufReader::new(File::open(path)?))?),
                None => None,
            };
            let outcome = train(&config, &out, examples)?;
            print_json(&outcome)
        }
        Command::Eval { checkpoint, seed, count } => {
            if count == 0 {
                return Err(Error::Input("--count must be positive".into()));
            }
            let (config, enc) = load_model(&checkpoint)?;
            let spec = config.task_spec();
            let summary = evaluate(&enc, &spec, &eval_examples(&spec, seed, count))?;
            print_json(&summary)
        }
        Command::Flops { config, span_aware, pruned } => {
            let config = TrainConfig::load(&config)?;
            let shape = FlopShape::from_train_config(&config);
            let widths = if span_aware && config.mechanism.uses_spans() {
                let enc = Encoder::new(config.encoder_config())?;
                SpanWidths::from_encoder(&enc)
            } else {
                SpanWidths::Full
            };
            let executed = if pruned {
                if config.drop_count == 0 {
                    return Err(Error::Input(
                        "--pruned needs a config with drop_count above zero".into(),
                    ));
                }
                shape.pruned_executed(config.drop_count)
            } else {
                shape.full_executed()
            };
            let report = shape.count(&widths, &executed);
            let (full_total, reduction) = if pruned {
                let full = shape.count(&widths, &shape.full_executed());
                let saved = (full.total - report.total) as f64 / full.total as f64;
                (Some(full.total), Some(saved))
            } else {
                (None, None)
            };
            print_json(&FlopsOut {
                mechanism: config.mechanism.label(),
                span_aware,
                executed: executed.label(),
                report,
                full_total,
                reduction,
            })
        }
        Command::Inspect { checkpoint } => {
            let (config, enc) = load_model(&checkpoint)?;
            let shape = FlopShape::from_train_config(&config);
            let widths = SpanWidths::from_encoder(&enc);
            let flops = shape.count(&widths, &shape.full_executed());
            let pruned_flops = (config.drop_count > 0)
                .then(|| shape.count(&widths, &shape.pruned_executed(config.drop_count)));
            print_json(&InspectOut {
                mechanism: config.mechanism.label(),
                census: enc.census(),
                spans: to_json_map(enc.span_readout()),
                alphas: to_json_map(enc.alpha_readout()),
                flops,
                pruned_flops,
            })
        }
        Command::GenData { seed, count, out, config } => {
            if count == 0 {
                return Err(Error::Input("--count must be positive".into()));
            }
            let spec = match config {
                Some(path) => TrainConfig::load(&path)?.task_spec(),
                None => TrainConfig::default().task_spec(),
            };
            let examples: Vec<_> = (0..count)
                .map(|i| generate_lookup(&spec, seed, TRAIN_STREAM, i as u64))
                .collect();
            let mut w = BufWriter::new(File::create(&out)?);
            write_jsonl(&mut w, &examples)?;
            print_json(&GenDataOut {
                seed,
                count,
                path: out.display().to_string(),
            })
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Io(_) | Error::Json(_) => 1,
        Error::ShapeMismatch { .. }
        | Error::NonFinite(_)
        | Error::Numeric(_)
        | Error::Corrupt(_) => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
