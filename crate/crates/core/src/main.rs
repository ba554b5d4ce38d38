use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use nsflow::checkpoint::{Checkpoint, CheckpointError, HistorySummary};
use nsflow::config::{ConfigError, RunConfig};
use nsflow::evaluation::{self, EvalError};
use nsflow::explain::{self, ExplainError, ReportFormat};
use nsflow::flowdata::{DataError, Dataset};
use nsflow::model::{Detector, ModelError};
use nsflow::pipeline::{self, PipelineError};
use nsflow::preprocess::PreprocessError;
use nsflow::trainer::TrainError;

#[derive(Parser)]
#[command(name = "nsflow", version, about = "Neurosymbolic multi-stage intrusion detection on flow records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic flow dataset as CSV and print its class counts.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a CSV dataset (or synthetic flows) and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class metrics, confusion matrix and threshold sweep.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Metrics at each decision threshold.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Decision pathway for selected flows.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "flow-id", required = true)]
        flow_id: Vec<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Attack-versus-normal statistics of attention importance.
    ValidateXai {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "text")]
        format: String,
    },
}

/// Exit code for the first recognised error family in the chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ExplainError>() {
            return match e {
                ExplainError::UnknownFormat(_) => 2,
                ExplainError::Model(_) => 4,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Config(_) => 2,
                PipelineError::Data(_) | PipelineError::Preprocess(_) => 3,
                PipelineError::Train(_) | PipelineError::Model(_) => 4,
            };
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return match e {
                CheckpointError::Config(_) => 2,
                _ => 5,
            };
        }
        if cause.is::<DataError>() || cause.is::<PreprocessError>() || cause.is::<EvalError>() {
            return 3;
        }
        if cause.is::<TrainError>() || cause.is::<ModelError>() {
            return 4;
        }
    }
    1
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// The checkpoint's detector and the flows to analyse: `data` if given,
/// else the held-out test split regenerated from the checkpoint config.
fn open(checkpoint: &Path, data: Option<&Path>) -> Result<(RunConfig, Detector, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, detector) = ck.detector()?;
    let ds = match data {
        Some(p) => pipeline::load_or_generate(&cfg, Some(p))?,
        None => pipeline::split(&cfg, &pipeline::load_or_generate(&cfg, None)?)?.test,
    };
    Ok((cfg, detector, ds))
}

fn print_counts(ds: &Dataset) {
    for (class, n) in ds.class_counts() {
        println!("{:<18} {n}", class.name());
    }
    println!("{:<18} {}", "Total", ds.len());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = pipeline::load_or_generate(&cfg, None)?;
            let file = File::create(&out).map_err(|source| DataError::Io {
                path: out.display().to_string(),
                source,
            })?;
            ds.write_csv(BufWriter::new(file))?;
            print_counts(&ds);
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = pipeline::load_or_generate(&cfg, data.as_deref())?;
            let splits = pipeline::split(&cfg, &ds)?;
            println!(
                "train={} val={} test={}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
            let (detector, history) = pipeline::fit(&cfg, &splits.train, &splits.val, |r| println!("{}", r.log_line()))?;
            Checkpoint::new(&detector, &cfg.to_text(), HistorySummary::from_history(&history)).save(&out)?;
            if let Some(best) = history.best() {
                println!("best epoch {} f1_c={:.4}", best.epoch, best.f1_c);
            }
            let preds = detector.predict(&splits.test)?;
            let report = evaluation::evaluate(&preds, &splits.test.labels(), detector.tau, &cfg.taus)?;
            print!("{}", evaluation::report_text(&report));
            println!("checkpoint written to {}", out.display());
        }
        Command::Evaluate { checkpoint, data, tau } => {
            let (cfg, detector, ds) = open(&checkpoint, data.as_deref())?;
            let preds = detector.predict(&ds)?;
            let report = evaluation::evaluate(&preds, &ds.labels(), tau.unwrap_or(detector.tau), &cfg.taus)?;
            print!("{}", evaluation::report_text(&report));
        }
        Command::Sweep { checkpoint, data, taus, format } => {
            let format: ReportFormat = format.parse()?;
            let (cfg, detector, ds) = open(&checkpoint, data.as_deref())?;
            let preds = detector.predict(&ds)?;
            let rows = evaluation::threshold_sweep(&preds, &ds.labels(), taus.as_deref().unwrap_or(&cfg.taus))?;
            match format {
                ReportFormat::Csv => print!("{}", evaluation::sweep_csv(&rows)),
                ReportFormat::Text => print!("{}", evaluation::sweep_text(&rows)),
                ReportFormat::KeyValue => {
                    for r in &rows {
                        println!(
                            "tau = {}; attack_f1 = {}; binary_f1 = {}; fpr = {}; combined_f1 = {}; predicted_attacks = {}",
                            r.tau, r.attack_f1, r.binary_f1, r.fpr, r.combined_f1, r.predicted_attacks
                        );
                    }
                }
            }
        }
        Command::Explain { checkpoint, data, flow_id, top_k, format } => {
            let format: ReportFormat = format.parse()?;
            let (cfg, detector, ds) = open(&checkpoint, data.as_deref())?;
            let records = flow_id
                .iter()
                .map(|&id| explain::explain_in(&detector, &ds, id, top_k.unwrap_or(cfg.top_k)))
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", explain::emit_explanations(&records, format));
        }
        Command::ValidateXai { checkpoint, data, group_size, seed, format } => {
            let format: ReportFormat = format.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (cfg, detector) = ck.detector()?;
            let ds = match data.as_deref() {
                Some(p) => pipeline::load_or_generate(&cfg, Some(p))?,
                None => pipeline::split(&cfg, &pipeline::load_or_generate(&cfg, None)?)?.held_out(),
            };
            let (attacks, normals) =
                explain::sample_groups(&ds, group_size.unwrap_or(cfg.xai_group_size), seed.unwrap_or(cfg.xai_seed));
            let report = explain::xai_validate(&detector, &ds.schema, &attacks, &normals)?;
            print!("{}", explain::emit_validation(&report, format));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
