//! `oodno`: generate PDE data, train neural-operator UQ methods, correct and
//! score their predictions, and emit reports.

mod commands;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use oodno_core::harness::{ExperimentConfig, DATA_DIR_ENV};
use oodno_core::pde_suite::{PdeFamily, Split};
use oodno_core::trainer::Diversity;
use oodno_core::uq::Method;

#[derive(Parser)]
#[command(name = "oodno", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    task: Option<PdeFamily>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated test splits.
    #[arg(long, global = true, value_delimiter = ',')]
    splits: Option<Vec<Split>>,
    #[arg(long, global = true)]
    nx: Option<usize>,
    #[arg(long, global = true)]
    nt: Option<usize>,
    #[arg(long, global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    n_test: Option<usize>,
    #[arg(long, global = true)]
    width: Option<usize>,
    #[arg(long, global = true)]
    modes: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    members: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Fixed diversity strength; omit to select it from the standard grid.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    diversity: Option<Diversity>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)
                .with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            task => task,
            seeds => seeds,
            splits => splits,
            nx => nx,
            nt => nt,
            n_train => n_train,
            n_test => n_test,
            width => model.width,
            modes => model.modes_t,
            modes => model.modes_x,
            epochs => train.max_epochs,
            lr => train.lr,
            members => ensemble_members,
            heads => diverse_heads,
            diversity => diversity,
        );
        if self.lambda.is_some() {
            cfg.lambda_diverse = self.lambda;
        }
        Ok(cfg)
    }

    fn data_root(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(oodno_core::harness::data_root)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the task for sampled parameters and save datasets.
    GenerateData {
        /// Generate only this split (default: train plus the configured test splits).
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `<data-dir>/<task>_<nt>x<nx>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one method for one seed and save its checkpoint directory.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predictive mean and std of a trained method on a test split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Split,
        /// Summary path stem; writes `<stem>_mean.bin`, `<stem>_std.bin`, `<stem>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the conservation-constrained correction to a summary.
    Probconserv {
        #[arg(long)]
        summary: PathBuf,
        /// One parameter value for every sample.
        #[arg(long, conflicts_with = "split")]
        param: Option<f64>,
        /// Take per-sample parameters from this stored test split.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a summary against a stored split; prints one JSON row.
    Evaluate {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        split: Split,
        /// Dataset directory holding the truth (default: the configured data directory).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also report the conservation error.
        #[arg(long)]
        constraint: bool,
        /// Whether the summary was corrected.
        #[arg(long, value_parser = ["before", "after"], default_value = "before")]
        stage: String,
        /// Append the row to this JSON-lines file instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diversity penalty ablation over kinds and λ.
    Ablate {
        /// Penalty kinds (default: all six).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<Diversity>>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.1,1,10,100")]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble vs diverse accuracy at matched forward FLOPs.
    CostSweep {
        #[arg(long, value_delimiter = ',', default_value = "4,6,8")]
        ensemble_widths: Vec<usize>,
        /// Default: the widths matching each ensemble's FLOPs.
        #[arg(long, value_delimiter = ',')]
        diverse_widths: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Weight-magnitude covariance and head distances of trained models.
    DiversityReport {
        /// One ensemble or multi-head checkpoint, or several single models.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluated rows into tables, or run the configured experiment
    /// end to end when no rows are given.
    Report {
        /// JSON-lines files written by `evaluate --out`.
        #[arg(long, num_args = 1..)]
        rows: Vec<PathBuf>,
        /// Reuse data from the data directory instead of generating it in memory.
        #[arg(long)]
        stored_data: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    commands::run(&cli.common, cli.command)
}
