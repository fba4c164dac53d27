//! Command-line front end.
//!
//! ```text
//! epl gen-data  [--config P] [--seed S] [--out FILE]
//! epl train     [--config P] [--seed S] [--out DIR] [--dataset FILE] [--checkpoint DIR]
//! epl eval      --checkpoint DIR --dataset FILE [--out FILE]
//! epl analyze   --checkpoint DIR --dataset FILE [--out DIR]
//! epl gradcheck [--config P] [--seed S]
//! epl sweep     [--config P] [--seed S] [--out DIR] [--dataset FILE]
//! ```
//!
//! A training run directory holds `config.json` (the effective config),
//! `metrics.csv`, `checkpoint/` (latest state, plus `epoch-NNNN/` snapshots
//! when `checkpoint_every` is set) and `analysis/` (held-out split at the
//! final checkpoint).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config error, 3 check
//! failure. Failures print one JSON line `{"error": kind, "message": text}`
//! to stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bank::Activation;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, save_dataset, split, Dataset};
use crate::error::{Error, Result};
use crate::eval::{analyze, evaluate, Analysis, EvalReport};
use crate::gradcheck::{run_suite, GradCheckReport};
use crate::rng::Rng;
use crate::train::{far_column, metrics_csv, train_from, TrainConfig, TrainState};

#[derive(Debug, Parser)]
#[command(name = "epl", version, about = "Empirical prototype learning on synthetic identity data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(CommonArgs),
    /// Train and write a run directory.
    Train(CommonArgs),
    /// Print a JSON metrics report for a checkpoint on a dataset.
    Eval(CommonArgs),
    /// Write negative-similarity and centroid-alignment CSVs.
    Analyze(CommonArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(CommonArgs),
    /// Train one model per activation and per β, one CSV row each.
    Sweep(CommonArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

impl CommonArgs {
    /// Config file (or defaults) with the `--seed` override applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }

    fn required<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::CheckFailed(_) => 3,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::CheckFailed(_) => "check_failed",
        Error::Io { .. } => "io",
        Error::VersionMismatch(_) => "version_mismatch",
        Error::DigestMismatch(_) => "digest_mismatch",
        Error::Format(_) => "format",
        _ => "runtime",
    }
}

/// Machine-readable error line.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": error_kind(e), "message": e.to_string() }).to_string()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_synthetic(&cfg.data)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_dataset(&ds, out)?;
    Ok(ds)
}

/// The dataset file if given, otherwise the configured synthetic set.
pub fn dataset_for(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => load_dataset(p),
        None => generate_synthetic(&cfg.data),
    }
}

/// Stratified train / held-out split of the run's dataset.
pub fn split_for(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    split(ds, cfg.test_fraction, &mut Rng::new(cfg.split_seed))
}

/// Train into `out_dir`. With `resume`, continue from that checkpoint, whose
/// training config must match `cfg.train`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, dataset: Option<&Path>, resume: Option<&Path>) -> Result<TrainState> {
    let ds = dataset_for(cfg, dataset)?;
    let (train_set, test_set) = split_for(cfg, &ds)?;
    write(&out_dir.join("config.json"), &cfg.to_json())?;
    let state = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.config.digest() != cfg.train.digest() {
                return Err(Error::DigestMismatch(format!(
                    "checkpoint {} was written with a different training config",
                    dir.display()
                )));
            }
            ck.state
        }
        None => TrainState::init(&cfg.train, train_set.dim(), train_set.num_classes())?,
    };
    let ck_dir = out_dir.join("checkpoint");
    let metrics_path = out_dir.join("metrics.csv");
    let state = train_from(state, &cfg.train, &train_set, Some(&test_set), |s| {
        write(&metrics_path, &metrics_csv(&s.metrics, &cfg.train.eval))?;
        if cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(ck_dir.join(format!("epoch-{:04}", s.epoch)), &cfg.train, s)?;
        }
        Ok(())
    })?;
    write(&metrics_path, &metrics_csv(&state.metrics, &cfg.train.eval))?;
    save_checkpoint(&ck_dir, &cfg.train, &state)?;
    let analysis = analyze(
        &state.encoder,
        &state.prototypes,
        state.bank.prototypes(),
        &test_set,
        cfg.train.eval.top_k.min(state.num_classes() - 1),
    )?;
    write_analysis(&analysis, &out_dir.join("analysis"))?;
    Ok(state)
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    evaluate(&ck.state.encoder, &ck.state.prototypes, &ds, &ck.config.eval)
}

pub fn write_analysis(analysis: &Analysis, dir: &Path) -> Result<()> {
    write(&dir.join("negatives_histogram.csv"), &analysis.negatives.histogram.to_csv())?;
    write(&dir.join("centroid_alignment.csv"), &analysis.alignment_csv())?;
    let summary = serde_json::to_string_pretty(&analysis.summary()).expect("summary serializes");
    write(&dir.join("summary.json"), &(summary + "\n"))
}

pub fn cmd_analyze(checkpoint: &Path, dataset: &Path, out_dir: &Path) -> Result<Analysis> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let k = ck.config.eval.top_k.min(ck.state.num_classes() - 1);
    let analysis = analyze(&ck.state.encoder, &ck.state.prototypes, ck.state.bank.prototypes(), &ds, k)?;
    write_analysis(&analysis, out_dir)?;
    Ok(analysis)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    run_suite(&cfg.gradcheck)
}

/// One cell of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// `activation` or `beta`: which parameter this row varies.
    pub varied: &'static str,
    pub activation: Activation,
    pub beta: f64,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Training configs of the sweep: activations at the configured β, then βs
/// at the configured activation.
pub fn sweep_cells(cfg: &RunConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut cells = Vec::new();
    for &a in &cfg.sweep.activations {
        let mut t = cfg.train.clone();
        t.bank.activation = a;
        cells.push(("activation", t));
    }
    for &b in &cfg.sweep.betas {
        let mut t = cfg.train.clone();
        t.epl.beta = b;
        cells.push(("beta", t));
    }
    cells
}

pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path, dataset: Option<&Path>) -> Result<Vec<SweepRow>> {
    let ds = dataset_for(cfg, dataset)?;
    let (train_set, test_set) = split_for(cfg, &ds)?;
    write(&out_dir.join("config.json"), &cfg.to_json())?;
    let mut rows = Vec::new();
    for (varied, t) in sweep_cells(cfg) {
        let state = crate::train::train(&t, &train_set, Some(&test_set))?;
        let last = state
            .metrics
            .last()
            .ok_or_else(|| Error::Config("sweep needs epochs ≥ 1".into()))?;
        rows.push(SweepRow {
            varied,
            activation: t.bank.activation,
            beta: t.epl.beta,
            final_loss: last.loss,
            report: last.eval.clone(),
        });
        write(&out_dir.join("sweep.csv"), &sweep_csv(&rows, &cfg.train.eval.fars))?;
    }
    Ok(rows)
}

/// `varied,activation,beta,<tar columns>,rank1,neg_top,final_loss`
pub fn sweep_csv(rows: &[SweepRow], fars: &[f64]) -> String {
    let mut out = String::from("varied,activation,beta");
    for &f in fars {
        out.push(',');
        out.push_str(&far_column(f));
    }
    out.push_str(",rank1,neg_top,final_loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}", r.varied, r.activation.name(), r.beta));
        for t in &r.report.tar_at_far {
            out.push_str(&format!(",{}", t.tar));
        }
        out.push_str(&format!(",{},{},{}\n", r.report.rank1, r.report.mean_top_negative, r.final_loss));
    }
    out
}

/// Run one parsed command, printing results to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = a.run_config()?;
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("dataset.txt"));
            let ds = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} samples of {} classes to {}", ds.len(), ds.num_classes(), out.display());
        }
        Command::Train(a) => {
            let cfg = a.run_config()?;
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("run"));
            let state = cmd_train(&cfg, &out, a.dataset.as_deref(), a.checkpoint.as_deref())?;
            print!("{}", metrics_csv(&state.metrics, &cfg.train.eval));
        }
        Command::Eval(a) => {
            let report = cmd_eval(a.required(&a.checkpoint, "checkpoint")?, a.required(&a.dataset, "dataset")?)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            if let Some(out) = &a.out {
                write(out, &text)?;
            }
            print!("{text}");
        }
        Command::Analyze(a) => {
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("analysis"));
            let analysis = cmd_analyze(a.required(&a.checkpoint, "checkpoint")?, a.required(&a.dataset, "dataset")?, &out)?;
            println!("{}", serde_json::to_string_pretty(&analysis.summary()).expect("summary serializes"));
        }
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(&a.run_config()?)?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(Error::CheckFailed("gradient check suite".into()));
            }
        }
        Command::Sweep(a) => {
            let cfg = a.run_config()?;
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("sweep"));
            let rows = cmd_sweep(&cfg, &out, a.dataset.as_deref())?;
            print!("{}", sweep_csv(&rows, &cfg.train.eval.fars));
        }
    }
    Ok(())
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::CheckFailed("x".into())), 3);
        assert_eq!(exit_code(&Error::Format("x".into())), 1);
        let line = error_line(&Error::Config("unknown field `foo`".into()));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "config");
        assert!(v["message"].as_str().unwrap().contains("foo"));
    }

    #[test]
    fn sweep_has_ten_cells_by_default() {
        let cells = sweep_cells(&RunConfig::default());
        assert_eq!(cells.len(), 10);
        assert_eq!(cells.iter().filter(|c| c.0 == "beta").count(), 5);
    }

    #[test]
    fn missing_required_flag_is_config_error() {
        let code = main_with_args(["epl", "eval", "--dataset", "x.txt"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(main_with_args(["epl", "frobnicate"]), 2);
    }
}
