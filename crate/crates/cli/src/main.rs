//! `raan` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.

use clap::{Parser, Subcommand};
use raan::experiment::{self, ExperimentConfig, ExperimentError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "raan", version, about = "Fairness-aware robust reweighting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one config; artifacts go to its output.dir.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several configs on the same data and tabulate mean ± std per method.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Destination CSV.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; each config runs once per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Check a config and list every violated invariant.
    Validate { config: PathBuf },
    /// Write a synthetic dataset preset to CSV.
    GenData {
        /// gaussian_biased, gaussian_fair, spurious_train or spurious_test.
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(e: ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_validation() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn load_and_warn(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let cfg = experiment::load_config(path)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed } => match load_and_warn(&config)
            .map(|c| match seed {
                Some(s) => c.with_seed(s),
                None => c,
            })
            .and_then(|c| experiment::run_experiment(&c))
        {
            Ok(s) => {
                println!(
                    "{} seed={} ({}): accuracy={:.4} dp_gap={:.4} eo_gap={:.4} worst_group_acc={:.4}",
                    s.method, s.seed, s.evaluated_on, s.accuracy, s.dp_gap, s.eo_gap, s.worst_group_acc
                );
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Compare { configs, out, seeds } => match experiment::compare(&configs, &seeds, &out) {
            Ok(rows) => {
                for r in rows {
                    let [acc, dp, eo, wg] = r.stats;
                    println!(
                        "{:<16} n={} accuracy={:.4}±{:.4} dp_gap={:.4}±{:.4} eo_gap={:.4}±{:.4} worst_group_acc={:.4}±{:.4}",
                        r.method, r.runs, acc.0, acc.1, dp.0, dp.1, eo.0, eo.1, wg.0, wg.1
                    );
                }
                println!("wrote {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Validate { config } => match experiment::validate_config(&config) {
            Ok(v) if v.is_empty() => {
                let _ = load_and_warn(&config);
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Ok(v) => {
                eprintln!("{}: {} problem(s)", config.display(), v.len());
                for msg in v {
                    eprintln!("  - {msg}");
                }
                ExitCode::from(1)
            }
            Err(e) => fail(e),
        },
        Command::GenData { preset, out, seed } => match experiment::gen_data(&preset, seed, &out) {
            Ok(ds) => {
                println!("wrote {} samples to {}", ds.n(), out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
