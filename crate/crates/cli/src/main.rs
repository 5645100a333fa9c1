//! `advmv`: train, attack and evaluate (adversarial) MultVAE recommenders
//! from a single TOML configuration.
//!
//! Verbs: `genseed` writes a synthetic two-class dataset, `preprocess`
//! caches the interaction matrix, `run` trains the model families over all
//! folds, `attack` probes frozen checkpoints with post-hoc classifier
//! heads, `sweep` repeats train+attack across the configured gradient
//! reversal scales, and `report` aggregates metrics, significance tests
//! and data series into `<out>/report/`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/artifact error,
//! 4 training divergence, 1 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adv_multvae::experiment::{
    cmd_attack, cmd_genseed, cmd_preprocess, cmd_report, cmd_run, cmd_sweep, ExperimentConfig,
    ReportFamily, TrainFamily,
};
use adv_multvae::{Error, Result};

/// Consulted for the configuration path when `--config` is absent.
const CONFIG_ENV: &str = "ADVMV_CONFIG";

#[derive(Parser)]
#[command(
    name = "advmv",
    version,
    about = "Adversarial MultVAE experiments: train, attack, evaluate"
)]
struct Cli {
    /// Experiment configuration file (TOML); defaults to $ADVMV_CONFIG.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for matrix products and attacker heads
    /// (0 = one per core).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Override the configured root seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic two-class dataset to the configured dataset paths.
    Genseed,
    /// Parse, filter and cache the interaction matrix; print its statistics.
    Preprocess,
    /// Train model families over all folds (both when --family is omitted).
    Run {
        /// Train a single family: multvae or adv-multvae.
        #[arg(long, value_name = "FAMILY")]
        family: Option<TrainFamily>,
    },
    /// Train attacker heads against frozen checkpoints (all three report
    /// families when --family is omitted).
    Attack {
        /// Attack a single family: multvae-best, multvae-last or
        /// adv-multvae.
        #[arg(long, value_name = "FAMILY")]
        family: Option<ReportFamily>,
    },
    /// Train and attack the adversarial model at every configured gradient
    /// reversal scale.
    Sweep,
    /// Aggregate metrics, significance tests and plot series into
    /// <out>/report/.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("advmv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!("no configuration given: pass --config or set ${CONFIG_ENV}"))
        })?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        adv_multvae::configure_workers(n)?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Cmd::Genseed => {
            let out = cmd_genseed(&cfg)?;
            let classes: Vec<String> = cfg
                .dataset
                .label_format
                .classes
                .iter()
                .zip(&out.class_counts)
                .map(|(name, n)| format!("{name} {n}"))
                .collect();
            println!(
                "wrote {} ({} interactions, hash {:016x})",
                out.interactions_path.display(),
                out.n_interactions,
                out.interactions_hash
            );
            println!(
                "wrote {} (classes {}, hash {:016x})",
                out.labels_path.display(),
                classes.join(", "),
                out.labels_hash
            );
        }
        Cmd::Preprocess => println!("{}", cmd_preprocess(&cfg)?),
        Cmd::Run { family } => println!("{}", cmd_run(&cfg, family)?),
        Cmd::Attack { family } => println!("{}", cmd_attack(&cfg, family)?),
        Cmd::Sweep => {
            let rows = cmd_sweep(&cfg)?;
            let scales = cfg.sweep.lambdas.len();
            println!(
                "wrote {} rows ({scales} reversal scales x {} folds) to {}",
                rows.len(),
                cfg.folds,
                cfg.out.join("sweep").join("results.tsv").display()
            );
        }
        Cmd::Report => {
            let report = cmd_report(&cfg)?;
            print!("{report}");
            println!("full tables in {}", cfg.out.join("report").display());
        }
    }
    Ok(())
}
