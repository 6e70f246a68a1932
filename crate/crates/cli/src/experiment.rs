//! Wires a validated [`ExperimentConfig`] into streams, buffers, learners and
//! the scheduler, and derives the per-experiment summaries.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use streamssl::analytics::{
    forgetting_curve, mean_relative_drop, openset_accuracy, ForgettingRecord,
};
use streamssl::buffer::{BufferSnapshot, ReplayBuffer};
use streamssl::learner::LearnerState;
use streamssl::scheduler::{run, CsvSink, ProbeEvaluator, RunConfig, RunLog, RunMode};
use streamssl::streams::{
    make_iid_stream, make_markov_stream, make_partitioned_stream, make_segment_stream,
    make_walk_stream, ClassModel, MarkovStreamConfig, PartitionSchedule, StreamSource,
    WalkStreamConfig,
};

use crate::config::{stream_len, ArmMode, ArmSection, ExperimentConfig, StreamSection};

/// Result of one arm under one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: String,
    pub seed: u64,
    pub log: RunLog,
    pub lifelong: Option<LifelongReport>,
    #[serde(skip)]
    pub buffer: Option<BufferSnapshot>,
}

impl ArmOutcome {
    pub fn final_metric(&self, name: &str) -> Option<f64> {
        let idx = self.log.metric_names.iter().position(|n| n == name)?;
        self.log.checkpoints.last().map(|c| c.metrics[idx])
    }

    /// Within-batch correlation over the last checkpoint window.
    pub fn final_correlation(&self) -> Option<f64> {
        self.log.checkpoints.last()?.within_batch_correlation
    }
}

/// Per-checkpoint metrics of a run on a partitioned stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifelongReport {
    pub permutation: Vec<usize>,
    /// Presentation stage active at each checkpoint.
    pub stage: Vec<usize>,
    /// `partition_accuracy[c][p]`: probe accuracy on partition `p`.
    pub partition_accuracy: Vec<Vec<f64>>,
    pub forgetting: Vec<ForgettingRecord>,
    /// Mean relative drop over partitions already finished, per checkpoint.
    pub mean_relative_drop: Vec<Option<f64>>,
    /// Mean accuracy on partitions not yet presented, per checkpoint.
    pub openset_accuracy: Vec<Option<f64>>,
    /// Fraction of buffer entries from partitions presented at earlier
    /// stages, per checkpoint.
    pub past_partition_fraction: Vec<Option<f64>>,
}

/// Fetch counts (stream batches) at which each partitioned-stream checkpoint
/// is taken, together with the stage it falls in.
pub fn partition_checkpoints(
    sched: &PartitionSchedule,
    batch_size: usize,
    per_partition: usize,
) -> Vec<(u64, usize)> {
    let batches = sched.samples_per_partition as f64 / batch_size as f64;
    let mut out = Vec::new();
    for stage in 0..sched.num_partitions() {
        for j in 1..=per_partition {
            let f = ((stage as f64 + j as f64 / per_partition as f64) * batches).round() as u64;
            if out.last().is_none_or(|&(g, _)| f > g) && f > 0 {
                out.push((f, stage));
            }
        }
    }
    out
}

/// Everything needed to execute one arm.
pub struct PreparedRun {
    pub run: RunConfig,
    pub stream: StreamSource,
    pub buffer: Option<ReplayBuffer>,
    pub learner: LearnerState,
    pub evaluator: ProbeEvaluator,
    pub schedule: Option<PartitionSchedule>,
    /// Stage of every requested checkpoint (partitioned streams only).
    pub stages: Vec<usize>,
}

fn build_stream(
    section: &StreamSection,
    model: Arc<ClassModel>,
    sched: Option<&PartitionSchedule>,
    seed: u64,
) -> streamssl::Result<StreamSource> {
    match section {
        StreamSection::Iid { length } => make_iid_stream(model, *length, seed),
        StreamSection::Segment { .. } => {
            make_segment_stream(model, &section.segment_config().expect("segment"), seed)
        }
        StreamSection::Markov { p_c, length, drift } => make_markov_stream(
            model,
            &MarkovStreamConfig {
                p_c: *p_c,
                drift: *drift,
            },
            *length,
            seed,
        ),
        StreamSection::Walk {
            trajectory_length,
            num_loops,
            mean_dwell,
            drift,
        } => make_walk_stream(
            model,
            &WalkStreamConfig {
                trajectory_length: *trajectory_length,
                num_loops: *num_loops,
                mean_dwell: *mean_dwell,
                drift: *drift,
            },
            seed,
        ),
        StreamSection::Partitioned { .. } => {
            make_partitioned_stream(model, sched.expect("schedule for partitioned stream"), seed)
        }
    }
}

/// Builds the stream, buffer, learner and evaluator for `arm` under the
/// `index`-th seed. Every arm of one seed sees the same stream, model,
/// initial weights and probe sets.
pub fn prepare(
    cfg: &ExperimentConfig,
    arm: &ArmSection,
    index: usize,
    seed: u64,
) -> Result<PreparedRun> {
    let section = cfg.stream.as_ref().context("missing [stream] section")?;
    let model = Arc::new(cfg.model.class_model(seed)?);
    let schedule = section
        .partition_schedule(&model, index, seed)
        .transpose()?;
    let mut stream = build_stream(section, model.clone(), schedule.as_ref(), seed)?;
    if arm.shuffle {
        stream = stream.shuffled(seed ^ 0x5348_5546);
    }
    let len = stream_len(section);

    let mode = arm.run_mode(&cfg.bandwidth);
    let mut run = RunConfig {
        mode,
        bandwidth: cfg.bandwidth.config(),
        batch_size: cfg.learner.batch_size,
        augmentation: cfg.learner.augmentation.clone(),
        schedule: cfg.learner.lr_schedule(1),
        embed_on_ingest: cfg.learner.embed_on_ingest,
        checkpoints: Vec::new(),
        seed,
    };
    run.schedule = cfg.learner.lr_schedule(run.planned_steps(len));

    let (fetches, stages): (Vec<u64>, Vec<usize>) = match &schedule {
        Some(s) => partition_checkpoints(
            s,
            cfg.learner.batch_size,
            cfg.evaluation.checkpoints_per_partition,
        )
        .into_iter()
        .unzip(),
        None => (cfg.evaluation.checkpoint_fetches.clone(), Vec::new()),
    };
    run.checkpoints = fetches
        .iter()
        .map(|&f| checkpoint_tick(&run, f, len))
        .collect();

    let buffer = match arm.mode {
        ArmMode::Buffered => Some(ReplayBuffer::with_alpha(
            cfg.buffer.capacity,
            arm.policy.unwrap_or(cfg.buffer.policy),
            cfg.buffer.alpha,
        )?),
        _ => None,
    };
    let learner = LearnerState::new(cfg.learner.learner_config(model.dim(), seed))?;
    let groups = schedule
        .as_ref()
        .map(|s| s.partitions.clone())
        .unwrap_or_default();
    let evaluator = ProbeEvaluator::from_model(
        &model,
        cfg.evaluation.probe_train_per_class,
        cfg.evaluation.probe_test_per_class,
        seed.wrapping_add(0x7072_6f62),
        groups,
        cfg.evaluation.probe_config(),
    );
    Ok(PreparedRun {
        run,
        stream,
        buffer,
        learner,
        evaluator,
        schedule,
        stages,
    })
}

/// Tick at which `fetches` stream batches have been trained on. For the
/// epoch oracle the same fraction of its training is used instead.
fn checkpoint_tick(run: &RunConfig, fetches: u64, len: usize) -> u64 {
    match run.mode {
        RunMode::EpochOracle { epochs } => run.ticks_after(fetches * epochs as u64, len),
        _ => run.ticks_after(fetches, len),
    }
}

/// Runs one prepared arm. When `csv` is given, checkpoint rows are streamed
/// into it as they are produced.
pub fn execute<W: Write>(
    arm: &str,
    seed: u64,
    p: PreparedRun,
    csv: Option<&mut CsvSink<W>>,
) -> Result<ArmOutcome> {
    let PreparedRun {
        run: run_cfg,
        stream,
        buffer,
        learner,
        mut evaluator,
        schedule,
        stages,
    } = p;
    let outcome = run(&run_cfg, stream, buffer, learner, &mut evaluator, csv)
        .with_context(|| format!("arm {arm:?}, seed {seed}"))?;
    let lifelong = match &schedule {
        Some(s) => Some(lifelong_report(&outcome.log, s, &stages)?),
        None => None,
    };
    Ok(ArmOutcome {
        arm: arm.to_string(),
        seed,
        buffer: outcome.buffer.as_ref().map(|b| b.snapshot()),
        log: outcome.log,
        lifelong,
    })
}

/// Convenience wrapper: prepare and execute without a CSV sink.
pub fn run_arm(
    cfg: &ExperimentConfig,
    arm: &ArmSection,
    index: usize,
    seed: u64,
) -> Result<ArmOutcome> {
    let p = prepare(cfg, arm, index, seed)?;
    execute::<std::io::Sink>(&arm.name, seed, p, None)
}

/// Forgetting, open-set accuracy and buffer retention from the requested
/// checkpoints of a partitioned run.
pub fn lifelong_report(
    log: &RunLog,
    sched: &PartitionSchedule,
    stages: &[usize],
) -> Result<LifelongReport> {
    let n = stages.len();
    anyhow::ensure!(
        log.checkpoints.len() >= n,
        "run recorded {} checkpoints, expected at least {n}",
        log.checkpoints.len()
    );
    let cps = &log.checkpoints[..n];
    let accuracy: Vec<Vec<f64>> = cps.iter().map(|c| c.metrics[1..].to_vec()).collect();
    let last_of_stage = |stage: usize| stages.iter().rposition(|&s| s == stage);
    let baseline: Vec<usize> = (0..sched.num_partitions())
        .map(|p| last_of_stage(sched.stage_of(p)).context("stage without checkpoint"))
        .collect::<Result<_>>()?;
    let forgetting = forgetting_curve(&accuracy, &baseline)?;
    let mean_drop = (0..n).map(|c| mean_relative_drop(&forgetting, c)).collect();
    let openset = openset_accuracy(&accuracy, stages, sched);
    let past = cps
        .iter()
        .zip(stages)
        .map(|(c, &stage)| {
            let earlier: BTreeSet<usize> = sched.permutation[..stage]
                .iter()
                .flat_map(|&p| sched.partitions[p].iter().copied())
                .collect();
            let total: usize = c.buffer_composition.values().sum();
            (total > 0).then(|| {
                let old: usize = c
                    .buffer_composition
                    .iter()
                    .filter(|(class, _)| earlier.contains(class))
                    .map(|(_, k)| k)
                    .sum();
                old as f64 / total as f64
            })
        })
        .collect();
    Ok(LifelongReport {
        permutation: sched.permutation.clone(),
        stage: stages.to_vec(),
        partition_accuracy: accuracy,
        forgetting,
        mean_relative_drop: mean_drop,
        openset_accuracy: openset,
        past_partition_fraction: past,
    })
}

/// Mean of a per-seed quantity, skipping missing values.
pub fn mean_of(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Across-seed averages for one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub final_probe_accuracy: Option<f64>,
    pub final_within_batch_correlation: Option<f64>,
    pub training_steps: f64,
    pub idle_fraction: f64,
    pub single_pass: bool,
    /// Lifelong only, averaged over seeds per checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_relative_drop: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub openset_accuracy: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub past_partition_fraction: Option<Vec<Option<f64>>>,
}

pub fn summarize(arm: &str, outcomes: &[ArmOutcome]) -> ArmSummary {
    let n = outcomes.len().max(1) as f64;
    let per_checkpoint =
        |f: &dyn Fn(&LifelongReport) -> &Vec<Option<f64>>| -> Option<Vec<Option<f64>>> {
            let reports: Vec<&LifelongReport> = outcomes
                .iter()
                .filter_map(|o| o.lifelong.as_ref())
                .collect();
            if reports.is_empty() {
                return None;
            }
            let len = reports.iter().map(|r| f(r).len()).min().unwrap_or(0);
            Some(
                (0..len)
                    .map(|c| mean_of(reports.iter().map(|r| f(r)[c])))
                    .collect(),
            )
        };
    ArmSummary {
        arm: arm.to_string(),
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        final_probe_accuracy: mean_of(outcomes.iter().map(|o| o.final_metric("probe_accuracy"))),
        final_within_batch_correlation: mean_of(outcomes.iter().map(|o| o.final_correlation())),
        training_steps: outcomes
            .iter()
            .map(|o| o.log.training_steps as f64)
            .sum::<f64>()
            / n,
        idle_fraction: outcomes.iter().map(|o| o.log.idle_fraction()).sum::<f64>() / n,
        single_pass: outcomes
            .iter()
            .all(|o| streamssl::scheduler::single_pass_guarantee(&o.log)),
        mean_relative_drop: per_checkpoint(&|r| &r.mean_relative_drop),
        openset_accuracy: per_checkpoint(&|r| &r.openset_accuracy),
        past_partition_fraction: per_checkpoint(&|r| &r.past_partition_fraction),
    }
}
