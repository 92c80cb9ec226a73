//! Command-line driver.
//!
//! Every subcommand reads a TOML experiment config, writes its artifacts
//! under `--out`, and exits with 0 on success, 1 when an invariant or the
//! lemma check is violated, 2 for configuration errors and 3 for I/O errors.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint};
use crate::oracle::{verify_lemma, Loss, TrialConfig};
use artifacts::{write_csv, write_json, write_jsonl};
use config::ExperimentConfig;
use pipeline::{prepare_data, run_distill, run_methods, train_sources};

#[derive(Debug, Parser)]
#[command(name = "decision", version, about = "Source-free multi-source adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    CrossEntropy,
    SquaredError,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per source domain and write checkpoints.
    TrainSources(Common),
    /// Adapt the trained sources to the target and run every enabled method.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Directory with source checkpoints (default: OUT/checkpoints).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Randomized check of the source-combination bound on finite domains.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, hide = true)]
        corrupt_predictor: bool,
    },
    /// Train a single student on the adapted ensemble's labels.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Directory with adapted checkpoints (default: OUT/adapted).
        #[arg(long)]
        adapted: Option<PathBuf>,
    },
    /// Merge finished runs into tables for plotting.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories written by `adapt`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Learned weights saved next to the adapted checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFile {
    pub sources: Vec<String>,
    pub alpha: Vec<f64>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

fn cmd_train_sources(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let start = Instant::now();
    let data = prepare_data(&cfg)?;
    let trained = train_sources(&cfg, &data)?;
    let dir = common.out.join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    for t in &trained {
        save_checkpoint(&t.model, &checkpoint_path(&dir, &t.model.domain))?;
    }

    #[derive(Serialize)]
    struct EpochLine<'a> {
        source: &'a str,
        epoch: usize,
        loss: f64,
    }
    write_jsonl(
        &common.out.join("source_training.jsonl"),
        trained.iter().flat_map(|t| {
            t.metrics.epoch_losses.iter().enumerate().map(|(e, &loss)| EpochLine {
                source: &t.model.domain,
                epoch: e + 1,
                loss,
            })
        }),
    )?;
    write_csv(
        &common.out.join("sources.csv"),
        &["source", "train_accuracy", "eval_accuracy"],
        trained.iter().map(|t| {
            vec![
                t.model.domain.clone(),
                t.metrics.train_accuracy.to_string(),
                t.eval_accuracy.to_string(),
            ]
        }),
    )?;
    write_json(
        &common.out.join("timing.json"),
        &serde_json::json!({ "train_sources_seconds": start.elapsed().as_secs_f64() }),
    )?;
    for t in &trained {
        println!(
            "{}: train accuracy {:.4}, held-out accuracy {:.4}",
            t.model.domain, t.metrics.train_accuracy, t.eval_accuracy
        );
    }
    Ok(())
}

fn cmd_adapt(common: &Common, checkpoints: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let start = Instant::now();
    let dir = checkpoints.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("checkpoints"));
    let models = cfg
        .sources
        .iter()
        .map(|s| load_checkpoint(&checkpoint_path(&dir, &s.name)))
        .collect::<Result<Vec<_>>>()?;
    let data = prepare_data(&cfg)?;
    let outcome = run_methods(&cfg, &data, models)?;
    let report = &outcome.report;
    std::fs::create_dir_all(&common.out)?;

    write_json(&common.out.join("run_report.json"), report)?;
    artifacts::write_run_tables(&common.out, report)?;
    if let Some(d) = &outcome.decision {
        let adapted = common.out.join("adapted");
        std::fs::create_dir_all(&adapted)?;
        for m in &d.models {
            save_checkpoint(m, &checkpoint_path(&adapted, &m.domain))?;
        }
        write_json(
            &adapted.join("alpha.json"),
            &AlphaFile {
                sources: d.models.iter().map(|m| m.domain.clone()).collect(),
                alpha: d.alpha().to_vec(),
            },
        )?;
    }
    write_json(
        &common.out.join("timing.json"),
        &serde_json::json!({ "adapt_seconds": start.elapsed().as_secs_f64() }),
    )?;
    for m in &report.methods {
        println!("{:<14} {:.4}", m.method, m.accuracy);
    }
    if let Some(d) = &report.decision {
        if !d.classifier_checksums_unchanged {
            return Err(Error::Violation("a classifier changed during adaptation".into()));
        }
        if d.max_simplex_error > 1e-9 || d.min_alpha < 0.0 {
            return Err(Error::Violation("aggregation weights left the simplex".into()));
        }
    }
    Ok(())
}

fn cmd_distill(common: &Common, adapted: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = adapted.map(Path::to_path_buf).unwrap_or_else(|| common.out.join("adapted"));
    let alpha: AlphaFile = artifacts::read_json(&dir.join("alpha.json"))?;
    let models = alpha
        .sources
        .iter()
        .map(|name| load_checkpoint(&checkpoint_path(&dir, name)))
        .collect::<Result<Vec<_>>>()?;
    let data = prepare_data(&cfg)?;
    let (out, summary) = run_distill(&cfg, &data, &models, &alpha.alpha)?;
    std::fs::create_dir_all(&common.out)?;
    save_checkpoint(&out.student, &common.out.join("student.json"))?;
    write_json(&common.out.join("distill.json"), &summary)?;
    write_jsonl(
        &common.out.join("distill.jsonl"),
        out.metrics
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, l)| serde_json::json!({ "epoch": e + 1, "loss": l })),
    )?;
    println!(
        "teacher {:.4}, student {:.4}, agreement {:.4}",
        summary.teacher_accuracy, summary.student_accuracy, summary.agreement
    );
    Ok(())
}

fn cmd_oracle(common: &Common, trials: Option<usize>, loss: Option<LossArg>, corrupt: bool) -> Result<()> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str::<TrialConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrialConfig::default(),
    };
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(l) = loss {
        cfg.loss = match l {
            LossArg::CrossEntropy => Loss::CrossEntropy,
            LossArg::SquaredError => Loss::SquaredError,
        };
    }
    cfg.corrupt_combined = corrupt;
    let report = verify_lemma(&cfg)?;
    std::fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("lemma_report.json"), &report)?;
    println!(
        "trials {}, violations {}, strict cases {}, max slack used {:e}",
        report.trials,
        report.violations.len(),
        report.strict_cases_checked,
        report.max_slack_used
    );
    if !report.passed() {
        return Err(Error::Violation(format!("{} lemma violations", report.violations.len())));
    }
    Ok(())
}

fn run_command(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainSources(common) => cmd_train_sources(common),
        Command::Adapt { common, checkpoints } => cmd_adapt(common, checkpoints.as_deref()),
        Command::Distill { common, adapted } => cmd_distill(common, adapted.as_deref()),
        Command::Oracle {
            common,
            trials,
            loss,
            corrupt_predictor,
        } => cmd_oracle(common, *trials, *loss, *corrupt_predictor),
        Command::Report { common, runs } => report::cmd_report(&common.out, runs).map(|_| ()),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_command(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
