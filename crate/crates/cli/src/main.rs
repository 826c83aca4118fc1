//! `plrn`: data generation, training, prediction, evaluation, gradient
//! checking and reporting for the boundary regression grounding model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plrn_core::config::{KeyValues, SyntheticConfig, TrainConfig};
use plrn_core::data::{generate, Dataset, Split};
use plrn_core::eval::DEFAULT_THRESHOLDS;
use plrn_core::head::{read_predictions, write_predictions};
use plrn_core::train::{self, EpochLog};
use plrn_core::{report, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "plrn", version, about = "Temporal video grounding by boundary regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic grounding dataset.
    GenData(GenData),
    /// Train a model and write checkpoint, logs and config.
    Train(TrainArgs),
    /// Predict boundaries for one split of a dataset.
    Predict(Predict),
    /// Score a prediction file against dataset boundaries.
    Evaluate(Evaluate),
    /// Compare analytic parameter gradients with finite differences.
    GradCheck(GradCheck),
    /// Build CSV tables from one or more training runs.
    Report(Report),
}

#[derive(Args, Debug)]
struct GenData {
    /// Synthetic data config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct Predict {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output prediction CSV.
    #[arg(long)]
    out: PathBuf,
    /// Split to predict: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Training config that must match the checkpoint architecture.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for word and temporal attention CSVs.
    #[arg(long, value_name = "DIR")]
    dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Evaluate {
    /// Prediction CSV written by `predict`.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated tIoU thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    thresholds: Vec<f64>,
    /// Also write the metrics as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheck {
    /// Training config whose architecture is checked.
    #[arg(long)]
    config: PathBuf,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Probe at most this many entries per parameter (all when omitted).
    #[arg(long)]
    max_per_param: Option<usize>,
    /// Seed for the probe sample and entry selection.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Central difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args, Debug)]
struct Report {
    /// Run directories or validation log files.
    #[arg(long, num_args = 1.., required = true)]
    logs: Vec<PathBuf>,
    /// Output directory for the CSV tables.
    #[arg(long)]
    out: PathBuf,
}

fn load_train_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut kv = KeyValues::load(path)?;
    kv.merge(&KeyValues::from_overrides(overrides)?);
    TrainConfig::from_key_values(&kv)
}

fn print_epoch(e: &EpochLog) {
    match &e.val {
        Some(r) => println!(
            "epoch {:>3}  loss {:.5}  val mIoU {:.2}  R@0.5 {:.2}",
            e.epoch,
            e.train.total,
            r.miou,
            r.recall(0.5).unwrap_or(f64::NAN)
        ),
        None => println!("epoch {:>3}  loss {:.5}", e.epoch, e.train.total),
    }
}

fn split_indices(data: &Dataset, split: &str) -> Result<Vec<usize>> {
    if split == "all" {
        return Ok((0..data.samples.len()).collect());
    }
    let s = Split::parse(split)
        .map_err(|_| Error::Input(format!("--split must be train, val, test or all, got `{split}`")))?;
    Ok(data.indices(s))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = SyntheticConfig::load(&a.config)?;
            let (data, _) = generate(&cfg)?;
            data.write(&a.out)?;
            println!(
                "wrote {} samples ({} videos, {} words) to {}",
                data.samples.len(),
                data.videos.len(),
                data.vocab.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = load_train_config(&a.config, &a.set)?;
            let data = Dataset::load(&a.data)?;
            let out = train::train_to_dir(&cfg, &data, &a.out, print_epoch)?;
            match out.best_val_miou() {
                Some(m) => println!("best epoch {} val mIoU {m:.2}", out.best_epoch),
                None => println!("trained {} epochs", out.epochs.len()),
            }
            println!("checkpoint {}", a.out.join(train::CHECKPOINT_FILE).display());
        }
        Command::Predict(a) => {
            let cfg = a.config.as_deref().map(TrainConfig::load).transpose()?;
            let loaded = train::load_model(&a.checkpoint, cfg.as_ref())?;
            let data = Dataset::load(&a.data)?;
            let indices = split_indices(&data, &a.split)?;
            if indices.is_empty() {
                return Err(Error::Data(format!("split `{}` is empty", a.split)));
            }
            let preds = loaded.predict_indices(&data, &indices)?;
            write_predictions(&a.out, &train::prediction_rows(&data, &preds))?;
            println!("wrote {} predictions to {}", preds.len(), a.out.display());
            if let Some(dir) = &a.dump_attention {
                for p in train::write_attention(dir, &data, loaded.model.cfg.max_words, &preds)? {
                    println!("wrote {}", p.display());
                }
            }
        }
        Command::Evaluate(a) => {
            if let Some(t) = a.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::Input(format!("--thresholds entries must lie in [0, 1], got {t}")));
            }
            let data = Dataset::load(&a.data)?;
            let rows = read_predictions(&a.pred)?;
            let r = train::evaluate_rows(&data, &rows, &a.thresholds)?;
            let mut line: Vec<String> = r.recalls.iter().map(|(t, v)| format!("R@{t}={v:.2}")).collect();
            line.push(format!("mIoU={:.2}", r.miou));
            println!("{}  ({} samples)", line.join(" "), r.count);
            if let Some(out) = &a.out {
                std::fs::write(out, r.to_csv()).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            }
        }
        Command::GradCheck(a) => {
            let cfg = TrainConfig::load(&a.config)?;
            let r = train::grad_check(&cfg, a.max_per_param, a.seed, a.step)?;
            println!(
                "checked {} entries, max relative error {:.3e} (denominator floor {:.1e}, {} kinked probes re-measured)",
                r.checked, r.max_relative_error, r.floor, r.kinks
            );
            if let Some(w) = &r.worst {
                println!(
                    "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.name, w.index, w.analytic, w.numeric
                );
            }
            if !r.passes(a.tolerance) {
                return Err(Error::Contract(format!(
                    "gradient check failed: {:.3e} exceeds tolerance {:.1e}",
                    r.max_relative_error, a.tolerance
                )));
            }
            println!("pass (tolerance {:.1e})", a.tolerance);
        }
        Command::Report(a) => {
            for p in report::write_report(&a.logs, &a.out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
