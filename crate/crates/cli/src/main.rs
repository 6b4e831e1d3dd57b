//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
//! Failures print one JSON object to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dar_mbo::harness::{self, SweepGrid};
use dar_mbo::{Error, ExperimentConfig, Profile};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dar-mbo", version, about = "Offline model-based optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the pool and write the offline dataset.
    GenData(Common),
    /// Train a surrogate on the dataset in the output directory.
    Train(Common),
    /// Run design search with the trained surrogate.
    Search(Common),
    /// Compute ranking-error and Wasserstein diagnostics.
    Diagnose(Common),
    /// All stages end to end.
    Run(Common),
    /// One run per grid cell and seed, plus a summary table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// TOML file with `seeds = [...]` and an `[axes]` table of dotted config paths.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Join finished runs into one CSV table.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Missing keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Worker threads; 1 gives a single-threaded run.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl Common {
    fn load(&self) -> dar_mbo::Result<ExperimentConfig> {
        let profile = self.profile.map(Profile::from);
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path, profile)?,
            None => ExperimentConfig::from_toml_str("", profile)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut body = json!({ "kind": e.kind(), "message": e.to_string() });
    if let Error::Validation { field, .. } = e {
        body["field"] = json!(field);
    }
    json!({ "error": body })
}

fn execute(cli: Cli) -> dar_mbo::Result<()> {
    match cli.command {
        Command::GenData(c) => staged(&c, harness::gen_data),
        Command::Train(c) => staged(&c, harness::train),
        Command::Search(c) => staged(&c, harness::search),
        Command::Diagnose(c) => staged(&c, harness::diagnose),
        Command::Run(c) => {
            let cfg = c.load()?;
            harness::init_thread_pool(c.threads)?;
            let summary = harness::run(&cfg)?;
            print_json(&serde_json::to_value(summary).map_err(|e| Error::parse("summary", e))?);
            Ok(())
        }
        Command::Sweep { common, grid } => {
            let cfg = common.load()?;
            let grid = SweepGrid::from_file(&grid)?;
            let threads = if common.threads == 0 { 1 } else { common.threads };
            let summary = harness::sweep(&cfg, &grid, threads)?;
            let failed: usize = summary.cells.iter().map(|c| c.failed).sum();
            print_json(&json!({
                "dir": cfg.output.dir,
                "cells": summary.cells.len(),
                "runs": summary.runs.len(),
                "failed": failed,
            }));
            Ok(())
        }
        Command::Compare { dirs, out } => {
            let table = harness::compare(&dirs)?;
            match out {
                Some(path) => std::fs::write(&path, table).map_err(|e| Error::io(&path, e)),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
    }
}

fn staged(c: &Common, stage: fn(&ExperimentConfig) -> dar_mbo::Result<()>) -> dar_mbo::Result<()> {
    let cfg = c.load()?;
    harness::init_thread_pool(c.threads)?;
    stage(&cfg)?;
    print_json(&json!({ "dir": cfg.output.dir }));
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = json!({ "error": { "kind": "usage", "message": e.to_string() } });
            eprintln!("{err}");
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
