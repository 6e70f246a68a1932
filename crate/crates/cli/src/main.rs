use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use streamssl_cli::analytics::write_analytics;
use streamssl_cli::compare::{compare_runs, load_runs, write_comparison_csv};
use streamssl_cli::config::ValidationErrors;
use streamssl_cli::{run_experiment, ExperimentConfig};

/// Replay-buffer experiments for self-supervised learning on streams.
///
/// Environment overrides: STREAMSSL_OUTPUT_DIR replaces `output_dir`,
/// STREAMSSL_SEED replaces `seeds` with a single seed.
#[derive(Parser)]
#[command(name = "streamssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every arm and seed of an experiment config.
    Run { config: PathBuf },
    /// Align checkpoints of finished runs and tabulate metrics.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Write the JSON summary here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the long-form CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// Print the correlation-likelihood table of a config's [analytics]
    /// section (defaults if absent) as CSV.
    Analytics { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<(ExperimentConfig, String)> {
    let (mut cfg, text) = ExperimentConfig::load(path)?;
    cfg.apply_env_overrides()?;
    Ok((cfg, text))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(v) = e.downcast_ref::<ValidationErrors>() {
                eprint!("{v}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { config } => {
            let (cfg, _) = load(&config)?;
            cfg.validate()?;
            println!(
                "{}: ok ({} seed(s), {} arm(s))",
                config.display(),
                cfg.seeds.len(),
                cfg.resolved_arms().len()
            );
        }
        Command::Run { config } => {
            let (cfg, text) = load(&config)?;
            let out = run_experiment(&cfg, &text)?;
            for arm in &out.summary.arms {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{:<20} probe_accuracy={} within_batch_correlation={} steps={:.0}",
                    arm.arm,
                    f(arm.final_probe_accuracy),
                    f(arm.final_within_batch_correlation),
                    arm.training_steps
                );
            }
            println!("outputs: {}", out.dir.display());
        }
        Command::Analytics { config } => {
            let (cfg, _) = load(&config)?;
            cfg.validate()?;
            let a = cfg.analytics.clone().unwrap_or_default();
            write_analytics(&a, cfg.seeds[0], std::io::stdout().lock())?;
        }
        Command::Compare { dirs, json, csv } => {
            let mut runs = Vec::new();
            for d in &dirs {
                runs.extend(load_runs(d)?);
            }
            let cmp = compare_runs(&runs)?;
            if let Some(path) = csv {
                let f = std::fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                write_comparison_csv(&cmp, f)?;
            }
            let text = serde_json::to_string_pretty(&cmp.finals)?;
            match json {
                Some(path) => std::fs::write(&path, text + "\n")?,
                None => writeln!(std::io::stdout(), "{text}")?,
            }
        }
    }
    Ok(())
}
