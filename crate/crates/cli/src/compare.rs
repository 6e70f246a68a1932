//! Side-by-side comparison of finished runs.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use streamssl::scheduler::{CheckpointRecord, RunLog};

use crate::experiment::LifelongReport;

/// A single arm's outputs on disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub label: String,
    pub log: RunLog,
    pub lifelong: Option<LifelongReport>,
}

/// Loads `dir` as an arm directory (holding `run.json`) or, failing that,
/// every arm directory inside an experiment directory.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    if dir.join("run.json").is_file() {
        return Ok(vec![load_arm(dir, &label_of(dir))?]);
    }
    let mut found = Vec::new();
    let mut seeds: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seeds.sort();
    for seed_dir in seeds {
        let mut arms: Vec<PathBuf> = std::fs::read_dir(&seed_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("run.json").is_file())
            .collect();
        arms.sort();
        for arm in arms {
            found.push(load_arm(&arm, &label_of(&arm))?);
        }
    }
    if found.is_empty() {
        bail!("{} holds no run.json", dir.display());
    }
    Ok(found)
}

fn label_of(dir: &Path) -> String {
    let comps: Vec<String> = dir
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    comps.into_iter().rev().collect::<Vec<_>>().join("/")
}

fn load_arm(dir: &Path, label: &str) -> Result<LoadedRun> {
    let path = dir.join("run.json");
    let log: RunLog = serde_json::from_reader(
        std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?,
    )
    .with_context(|| format!("parsing {}", path.display()))?;
    let ll = dir.join("lifelong.json");
    let lifelong = if ll.is_file() {
        Some(serde_json::from_reader(std::fs::File::open(&ll)?)?)
    } else {
        None
    };
    Ok(LoadedRun {
        label: label.to_string(),
        log,
        lifelong,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFinal {
    pub label: String,
    pub mode: String,
    pub final_probe_accuracy: Option<f64>,
    pub final_within_batch_correlation: Option<f64>,
    pub final_mean_relative_drop: Option<f64>,
    /// Differences to the first run.
    pub delta_probe_accuracy: Option<f64>,
    pub delta_mean_relative_drop: Option<f64>,
}

/// Metrics aligned on the checkpoint ticks shared by every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub ticks: Vec<u64>,
    /// `(metric, values[tick][run])`.
    pub tables: Vec<(String, Vec<Vec<Option<f64>>>)>,
    pub finals: Vec<RunFinal>,
    pub warnings: Vec<String>,
}

fn metric(rec: &CheckpointRecord, log: &RunLog, name: &str) -> Option<f64> {
    match name {
        "within_batch_correlation" => rec.within_batch_correlation,
        "mean_loss" => rec.mean_loss,
        "step_count" => Some(rec.step_count as f64),
        _ => log
            .metric_names
            .iter()
            .position(|n| n == name)
            .map(|i| rec.metrics[i]),
    }
}

pub fn compare_runs(runs: &[LoadedRun]) -> Result<Comparison> {
    if runs.is_empty() {
        bail!("nothing to compare: the run list is empty");
    }
    let mut warnings = Vec::new();
    let grids: Vec<BTreeSet<u64>> = runs
        .iter()
        .map(|r| r.log.checkpoints.iter().map(|c| c.tick).collect())
        .collect();
    let mut common = grids[0].clone();
    for g in &grids[1..] {
        common = common.intersection(g).copied().collect();
    }
    if grids.iter().any(|g| g.len() != common.len()) {
        let msg = if common.is_empty() {
            "checkpoint grids are disjoint; only final values are compared".to_string()
        } else {
            format!(
                "checkpoint grids differ; restricted to {} shared tick(s)",
                common.len()
            )
        };
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let ticks: Vec<u64> = common.into_iter().collect();

    let mut names = vec![
        "step_count".to_string(),
        "mean_loss".to_string(),
        "within_batch_correlation".to_string(),
    ];
    for r in runs {
        for n in &r.log.metric_names {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }
    let tables = names
        .into_iter()
        .map(|name| {
            let rows = ticks
                .iter()
                .map(|&t| {
                    runs.iter()
                        .map(|r| {
                            r.log
                                .checkpoints
                                .iter()
                                .find(|c| c.tick == t)
                                .and_then(|c| metric(c, &r.log, &name))
                        })
                        .collect()
                })
                .collect();
            (name, rows)
        })
        .collect();

    let final_of = |r: &LoadedRun| -> (Option<f64>, Option<f64>, Option<f64>) {
        let last = r.log.checkpoints.last();
        (
            last.and_then(|c| metric(c, &r.log, "probe_accuracy")),
            last.and_then(|c| c.within_batch_correlation),
            r.lifelong
                .as_ref()
                .and_then(|l| l.mean_relative_drop.last().copied().flatten()),
        )
    };
    let (base_acc, _, base_drop) = final_of(&runs[0]);
    let finals = runs
        .iter()
        .map(|r| {
            let (acc, corr, drop) = final_of(r);
            RunFinal {
                label: r.label.clone(),
                mode: r.log.mode.label().to_string(),
                final_probe_accuracy: acc,
                final_within_batch_correlation: corr,
                final_mean_relative_drop: drop,
                delta_probe_accuracy: acc.zip(base_acc).map(|(a, b)| a - b),
                delta_mean_relative_drop: drop.zip(base_drop).map(|(a, b)| a - b),
            }
        })
        .collect();
    Ok(Comparison {
        labels: runs.iter().map(|r| r.label.clone()).collect(),
        ticks,
        tables,
        finals,
        warnings,
    })
}

/// Long-form CSV: `metric,tick,<label…>`.
pub fn write_comparison_csv<W: Write>(c: &Comparison, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["metric".to_string(), "tick".to_string()];
    header.extend(c.labels.iter().cloned());
    out.write_record(&header)?;
    for (name, rows) in &c.tables {
        for (t, row) in c.ticks.iter().zip(rows) {
            let mut rec = vec![name.clone(), t.to_string()];
            rec.extend(
                row.iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}
