//! `dancer` — experiment runner for debiased rating prediction under
//! dynamic selection bias.
//!
//! Every subcommand reads one flat key=value config (optional) plus
//! command-line overrides, runs deterministically from the configured
//! seeds, and writes CSV reports into the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dancer_core::experiments::{self, ExperimentConfig, Rq1Report, Rq2Report, Rq3Report};

#[derive(Parser)]
#[command(name = "dancer", version, about = "Debiased rating prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. --set train.lr=0.001 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Path to ratings.csv (config key `dataset`).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    /// Output directory (config key `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Single run seed (config key `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Serialized world directory (config key `world`).
    #[arg(long, global = true)]
    world: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the dataset, print its dimensions, emit fig1.csv.
    Ingest,
    /// Partition the dataset and write the split manifest.
    Split,
    /// Fit one propensity estimator and export its table.
    FitPropensity,
    /// Train one model; writes checkpoint.csv and training_report.csv.
    Train,
    /// Evaluate a saved checkpoint on the test partition.
    Evaluate,
    /// Generate a semi-synthetic world under out/world/.
    Simulate,
    /// Print the exact two-period counterexample expectations.
    Oracle,
    /// Observation prediction study (NLL/PPL over methods and splits).
    Rq1,
    /// Rating prediction study (observed and debiased settings).
    Rq2,
    /// Debiasing study on simulated worlds (plus propensity robustness).
    Rq3,
}

fn build_config(cli: &Cli) -> dancer_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::new(),
    };
    if let Some(dataset) = &cli.dataset {
        cfg.set("dataset", &dataset.display().to_string());
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.display().to_string());
    }
    if let Some(seed) = cli.seed {
        cfg.set("seeds", &seed.to_string());
    }
    if let Some(world) = &cli.world {
        cfg.set("world", &world.display().to_string());
    }
    for pair in &cli.overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            dancer_core::Error::Config(format!("--set expects KEY=VALUE, got '{pair}'"))
        })?;
        cfg.set(key.trim(), value.trim());
    }
    Ok(cfg)
}

fn print_rq1(report: &Rq1Report) {
    println!(
        "{:<11} {:<9} {:>10} {:>10} {:>10} {:>10}  sig-vs-mf",
        "strategy", "method", "nll_mean", "nll_std", "ppl_mean", "ppl_std"
    );
    for r in &report.rows {
        println!(
            "{:<11} {:<9} {:>10.4} {:>10.4} {:>10.4} {:>10.4}  {}",
            r.strategy.as_str(),
            r.method,
            r.nll_mean,
            r.nll_std,
            r.ppl_mean,
            r.ppl_std,
            r.significant_vs_mf.map(|b| b.to_string()).unwrap_or_default(),
        );
    }
}

fn print_rq2(report: &Rq2Report) {
    println!(
        "{:<9} {:<7} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}  sig-vs-mf",
        "setting", "method", "mse", "mse_std", "mae", "mae_std", "acc", "acc_std"
    );
    for r in &report.rows {
        println!(
            "{:<9} {:<7} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}  {}",
            r.setting,
            r.method,
            r.mse_mean,
            r.mse_std,
            r.mae_mean,
            r.mae_std,
            r.acc_mean,
            r.acc_std,
            r.significant_vs_mf.map(|b| b.to_string()).unwrap_or_default(),
        );
    }
}

fn print_rq3(report: &Rq3Report) {
    println!(
        "{:<7} {:<22} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "table", "method", "mse", "mse_std", "mae", "mae_std", "acc", "acc_std"
    );
    for r in &report.rows {
        println!(
            "{:<7} {:<22} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.table, r.method, r.mse_mean, r.mse_std, r.mae_mean, r.mae_std, r.acc_mean,
            r.acc_std,
        );
    }
    if !report.pairs.is_empty() {
        println!("\nadjacent MSE comparisons (paired t-test, p < 0.01):");
        for p in &report.pairs {
            println!(
                "  {} vs {}: diff {:+.4} p {} significant {}",
                p.method_a,
                p.method_b,
                p.mse_mean_diff,
                p.p_value.map(|v| format!("{v:.2e}")).unwrap_or_else(|| "-".into()),
                p.significant,
            );
        }
    }
}

fn run(cli: &Cli) -> dancer_core::Result<()> {
    let cfg = build_config(cli)?;
    match cli.command {
        Command::Ingest => println!("{}", experiments::run_ingest(&cfg)?),
        Command::Split => println!("{}", experiments::run_split(&cfg)?),
        Command::FitPropensity => println!("{}", experiments::run_fit_propensity(&cfg)?),
        Command::Train => println!("{}", experiments::run_train(&cfg)?),
        Command::Evaluate => println!("{}", experiments::run_evaluate(&cfg)?),
        Command::Simulate => println!("{}", experiments::run_simulate(&cfg)?),
        Command::Oracle => println!("{}", experiments::run_oracle()?),
        Command::Rq1 => print_rq1(&experiments::run_rq1(&cfg)?),
        Command::Rq2 => print_rq2(&experiments::run_rq2(&cfg)?),
        Command::Rq3 => print_rq3(&experiments::run_rq3(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
