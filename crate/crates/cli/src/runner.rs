//! Experiment execution with on-disk outputs.
//!
//! Layout of one invocation:
//!
//! ```text
//! <output_dir>/<name>-<UTC timestamp>/
//!     config.toml            the file as given, verbatim
//!     resolved.toml          every field after defaults and env overrides
//!     summary.json           per-arm averages over seeds
//!     seed-<s>/<arm>/log.csv      one row per checkpoint
//!     seed-<s>/<arm>/run.json     full run log
//!     seed-<s>/<arm>/buffer.json  final buffer contents (buffered arms)
//!     seed-<s>/<arm>/lifelong.csv per-checkpoint forgetting and open-set
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use streamssl::scheduler::CsvSink;

use crate::analytics::write_analytics;
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::experiment::{execute, prepare, summarize, ArmOutcome, ArmSummary, LifelongReport};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
}

pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub summary: ExperimentSummary,
    pub outcomes: Vec<ArmOutcome>,
}

/// Creates `<root>/<name>-<timestamp>`, adding a numeric suffix if that
/// directory already exists.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{name}-{stamp}");
    for i in 0.. {
        let candidate = if i == 0 {
            root.join(&base)
        } else {
            root.join(format!("{base}-{i}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", candidate.display())),
        }
    }
    unreachable!()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_lifelong_csv(path: &Path, r: &LifelongReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let parts = r.partition_accuracy.first().map_or(0, |row| row.len());
    let mut header = vec!["checkpoint".to_string(), "stage".to_string()];
    header.extend((0..parts).map(|p| format!("accuracy_partition{p}")));
    header.extend(
        [
            "mean_relative_drop",
            "openset_accuracy",
            "past_partition_fraction",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for c in 0..r.stage.len() {
        let mut row = vec![c.to_string(), r.stage[c].to_string()];
        row.extend(r.partition_accuracy[c].iter().map(|a| a.to_string()));
        row.push(fmt_opt(r.mean_relative_drop[c]));
        row.push(fmt_opt(r.openset_accuracy[c]));
        row.push(fmt_opt(r.past_partition_fraction[c]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every seed and arm of `cfg`, writing outputs under a fresh
/// timestamped directory. `config_text` is echoed verbatim.
///
/// A failing arm leaves the logs written so far in place; the error names the
/// arm and seed.
pub fn run_experiment(cfg: &ExperimentConfig, config_text: &str) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let dir = create_run_dir(&cfg.output_dir, &cfg.name)?;
    fs::write(dir.join("config.toml"), config_text)?;
    fs::write(dir.join("resolved.toml"), toml::to_string_pretty(cfg)?)?;
    log::info!("writing to {}", dir.display());

    if cfg.kind == ExperimentKind::AnalyticsOnly {
        let a = cfg.analytics.clone().unwrap_or_default();
        let seed = cfg.seeds[0];
        write_analytics(&a, seed, File::create(dir.join("analytics.csv"))?)?;
        let summary = ExperimentSummary {
            name: cfg.name.clone(),
            kind: cfg.kind,
            seeds: vec![seed],
            arms: Vec::new(),
        };
        write_json(&dir.join("summary.json"), &summary)?;
        return Ok(ExperimentOutput {
            dir,
            summary,
            outcomes: Vec::new(),
        });
    }

    let arms = cfg.resolved_arms();
    let mut outcomes = Vec::new();
    for (index, &seed) in cfg.seeds.iter().enumerate() {
        for arm in &arms {
            let arm_dir = dir.join(format!("seed-{seed}")).join(&arm.name);
            fs::create_dir_all(&arm_dir)?;
            log::info!("seed {seed}: {}", arm.name);
            let prepared = prepare(cfg, arm, index, seed)?;
            let mut sink = CsvSink::new(BufWriter::new(File::create(arm_dir.join("log.csv"))?));
            let result = execute(&arm.name, seed, prepared, Some(&mut sink));
            sink.into_inner().flush()?;
            let outcome = match result {
                Ok(o) => o,
                Err(e) => {
                    fs::write(arm_dir.join("error.txt"), format!("{e:#}\n"))?;
                    return Err(e);
                }
            };
            write_json(&arm_dir.join("run.json"), &outcome.log)?;
            if let (Some(snap), true) = (&outcome.buffer, cfg.evaluation.buffer_snapshot) {
                write_json(&arm_dir.join("buffer.json"), snap)?;
            }
            if let Some(r) = &outcome.lifelong {
                write_lifelong_csv(&arm_dir.join("lifelong.csv"), r)?;
                write_json(&arm_dir.join("lifelong.json"), r)?;
            }
            if let Some(reason) = &outcome.log.aborted {
                log::warn!("seed {seed}, {}: training aborted: {reason}", arm.name);
            }
            outcomes.push(outcome);
        }
    }

    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        kind: cfg.kind,
        seeds: cfg.seeds.clone(),
        arms: arms
            .iter()
            .map(|a| {
                let mine: Vec<ArmOutcome> = outcomes
                    .iter()
                    .filter(|o| o.arm == a.name)
                    .cloned()
                    .collect();
                summarize(&a.name, &mine)
            })
            .collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(ExperimentOutput {
        dir,
        summary,
        outcomes,
    })
}
