//! Experiment configuration files (TOML).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use streamssl::buffer::EvictionPolicy;
use streamssl::learner::{
    AugmentationConfig, LearnerConfig, LrSchedule, PredictorInit, ProbeConfig,
};
use streamssl::scheduler::{BandwidthConfig, RunMode};
use streamssl::streams::{
    ClassModel, ClassModelConfig, MarkovStreamConfig, PartitionSchedule, SegmentStreamConfig,
    WalkStreamConfig,
};

/// Environment variable overriding `output_dir`.
pub const ENV_OUTPUT_DIR: &str = "STREAMSSL_OUTPUT_DIR";
/// Environment variable replacing `seeds` with a single seed.
pub const ENV_SEED: &str = "STREAMSSL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Conventional vs buffered vs epoch oracle on a stationary stream.
    Efficiency,
    /// Sequential vs FIFO vs MinRed on a temporally correlated stream.
    Correlated,
    /// Non-stationary class partitions: forgetting, open-set accuracy and
    /// buffer retention.
    Lifelong,
    /// Correlation-likelihood tables only; no training.
    AnalyticsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    pub stream: Option<StreamSection>,
    #[serde(default)]
    pub buffer: BufferSection,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub bandwidth: BandwidthSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    /// Compared configurations. Empty means the defaults for `kind`.
    #[serde(default)]
    pub arms: Vec<ArmSection>,
    pub analytics: Option<AnalyticsSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_classes: usize,
    pub dim: usize,
    pub within_class_scale: f64,
    pub separation: f64,
    pub level_decay: f64,
    /// Fixed geometry seed. When absent each run seed draws its own class
    /// means.
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_classes: 16,
            dim: 128,
            within_class_scale: 1.0,
            separation: 6.0,
            level_decay: 1.0,
            seed: None,
        }
    }
}

impl ModelSection {
    pub fn class_model(&self, run_seed: u64) -> streamssl::Result<ClassModel> {
        ClassModel::new(&ClassModelConfig {
            num_classes: self.num_classes,
            dim: self.dim,
            within_class_scale: self.within_class_scale,
            separation: self.separation,
            level_decay: self.level_decay,
            seed: self.seed.unwrap_or(run_seed),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSection {
    Iid {
        length: usize,
    },
    Segment {
        n_seq: usize,
        within_segment_drift: f64,
        num_segments: usize,
    },
    Markov {
        p_c: f64,
        length: usize,
        #[serde(default = "default_chain_drift")]
        drift: f64,
    },
    Walk {
        trajectory_length: usize,
        num_loops: usize,
        #[serde(default = "default_dwell")]
        mean_dwell: f64,
        #[serde(default = "default_chain_drift")]
        drift: f64,
    },
    Partitioned {
        #[serde(default = "default_partitions")]
        num_partitions: usize,
        samples_per_partition: usize,
        #[serde(default = "default_transition")]
        transition_fraction: f64,
        /// One presentation order per seed, cycled. When absent, each seed
        /// shuffles the partitions.
        #[serde(default)]
        permutations: Vec<Vec<usize>>,
    },
}

fn default_chain_drift() -> f64 {
    MarkovStreamConfig::new(0.5).drift
}

fn default_dwell() -> f64 {
    WalkStreamConfig::new(1, 1).mean_dwell
}

fn default_partitions() -> usize {
    4
}

fn default_transition() -> f64 {
    0.1
}

impl StreamSection {
    pub fn segment_config(&self) -> Option<SegmentStreamConfig> {
        match *self {
            StreamSection::Segment {
                n_seq,
                within_segment_drift,
                num_segments,
            } => Some(SegmentStreamConfig {
                n_seq,
                within_segment_drift,
                num_segments,
            }),
            _ => None,
        }
    }

    /// Partition schedule for the `index`-th seed of a partitioned stream.
    pub fn partition_schedule(
        &self,
        model: &ClassModel,
        index: usize,
        seed: u64,
    ) -> Option<streamssl::Result<PartitionSchedule>> {
        let StreamSection::Partitioned {
            num_partitions,
            samples_per_partition,
            transition_fraction,
            permutations,
        } = self
        else {
            return None;
        };
        let permutation = if permutations.is_empty() {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..*num_partitions).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            perm
        } else {
            permutations[index % permutations.len()].clone()
        };
        Some(PartitionSchedule::new(
            model,
            *num_partitions,
            *samples_per_partition,
            *transition_fraction,
            permutation,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferSection {
    pub capacity: usize,
    pub policy: EvictionPolicy,
    pub alpha: f64,
}

impl Default for BufferSection {
    fn default() -> Self {
        BufferSection {
            capacity: 512,
            policy: EvictionPolicy::MinRed,
            alpha: streamssl::buffer::DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineFixedEnd,
    Constant,
    ConstantPlusDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSection {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub predictor_init: PredictorInit,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: ScheduleKind,
    pub decay_start_fraction: f64,
    pub embed_on_ingest: bool,
    pub augmentation: AugmentationConfig,
}

impl Default for LearnerSection {
    fn default() -> Self {
        let l = LearnerConfig::default();
        LearnerSection {
            hidden_dim: l.hidden_dim,
            embed_dim: l.embed_dim,
            momentum: l.momentum,
            weight_decay: l.weight_decay,
            predictor_init: l.predictor_init,
            batch_size: 64,
            base_lr: 0.05,
            schedule: ScheduleKind::CosineFixedEnd,
            decay_start_fraction: 0.8,
            embed_on_ingest: true,
            augmentation: AugmentationConfig {
                noise_scale: 1.0,
                ..Default::default()
            },
        }
    }
}

impl LearnerSection {
    pub fn learner_config(&self, input_dim: usize, seed: u64) -> LearnerConfig {
        LearnerConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            predictor_init: self.predictor_init,
            seed,
        }
    }

    pub fn lr_schedule(&self, total_steps: u64) -> LrSchedule {
        match self.schedule {
            ScheduleKind::CosineFixedEnd => LrSchedule::CosineFixedEnd {
                base_lr: self.base_lr,
                total_steps,
            },
            ScheduleKind::Constant => LrSchedule::Constant {
                base_lr: self.base_lr,
            },
            ScheduleKind::ConstantPlusDecay => LrSchedule::ConstantPlusDecay {
                base_lr: self.base_lr,
                total_steps,
                decay_start_fraction: self.decay_start_fraction,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthSection {
    pub t_data: u64,
    pub t_opt: u64,
    pub k: usize,
}

impl Default for BandwidthSection {
    fn default() -> Self {
        BandwidthSection {
            t_data: 10,
            t_opt: 1,
            k: 10,
        }
    }
}

impl BandwidthSection {
    pub fn config(&self) -> BandwidthConfig {
        BandwidthConfig::new(self.t_data, self.t_opt, self.k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Checkpoint positions in stream batches fetched. Ignored for
    /// partitioned streams, which use `checkpoints_per_partition`.
    pub checkpoint_fetches: Vec<u64>,
    /// Evenly spaced checkpoints per partition span, the last one closing
    /// the span.
    pub checkpoints_per_partition: usize,
    pub probe_train_per_class: usize,
    pub probe_test_per_class: usize,
    pub probe_tolerance: f64,
    pub probe_max_iterations: usize,
    /// Write the final buffer contents next to each run log.
    pub buffer_snapshot: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        EvaluationSection {
            checkpoint_fetches: Vec::new(),
            checkpoints_per_partition: 2,
            probe_train_per_class: 100,
            probe_test_per_class: 100,
            probe_tolerance: p.tolerance,
            probe_max_iterations: p.max_iterations,
            buffer_snapshot: true,
        }
    }
}

impl EvaluationSection {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            tolerance: self.probe_tolerance,
            max_iterations: self.probe_max_iterations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmMode {
    Conventional,
    Buffered,
    EpochOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    pub name: String,
    pub mode: ArmMode,
    /// Overrides `buffer.policy`.
    #[serde(default)]
    pub policy: Option<EvictionPolicy>,
    /// Passes over the stored stream, for `epoch_oracle` only. Defaults to
    /// the hyper-sampling rate.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Train on the same samples in shuffled order.
    #[serde(default)]
    pub shuffle: bool,
}

impl ArmSection {
    fn new(name: &str, mode: ArmMode, policy: Option<EvictionPolicy>, shuffle: bool) -> Self {
        ArmSection {
            name: name.into(),
            mode,
            policy,
            epochs: None,
            shuffle,
        }
    }

    pub fn run_mode(&self, bandwidth: &BandwidthSection) -> RunMode {
        match self.mode {
            ArmMode::Conventional => RunMode::Conventional,
            ArmMode::Buffered => RunMode::Buffered,
            ArmMode::EpochOracle => RunMode::EpochOracle {
                epochs: self.epochs.unwrap_or(bandwidth.k),
            },
        }
    }
}

/// Sweep of the correlation-likelihood formulas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsSection {
    pub batch_sizes: Vec<usize>,
    pub p_c: Vec<f64>,
    pub monte_carlo_trials: usize,
    /// Window multiplier for the FIFO reduction table (`B = factor * b`).
    pub fifo_factor: usize,
}

impl Default for AnalyticsSection {
    fn default() -> Self {
        AnalyticsSection {
            batch_sizes: vec![2, 8, 32, 128, 512],
            p_c: (0..=10).map(|i| i as f64 / 10.0).collect(),
            monte_carlo_trials: 10_000,
            fifo_factor: 16,
        }
    }
}

/// A validation failure tied to a config field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug)]
pub struct ValidationErrors(pub Vec<FieldError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration ({} problem(s)):", self.0.len())?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        let cfg = Self::from_toml(&text)
            .map_err(|e| anyhow::anyhow!("cannot parse {}: {e}", path.display()))?;
        Ok((cfg, text))
    }

    /// Applies the environment overrides for output directory and seed.
    pub fn apply_env_overrides(&mut self) -> anyhow::Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(seed) = std::env::var(ENV_SEED) {
            let seed = seed.trim().parse().map_err(|_| {
                anyhow::anyhow!("{ENV_SEED} must be an unsigned integer, got {seed:?}")
            })?;
            self.seeds = vec![seed];
        }
        Ok(())
    }

    /// Arms to run, falling back to the defaults for the experiment kind.
    pub fn resolved_arms(&self) -> Vec<ArmSection> {
        if !self.arms.is_empty() {
            return self.arms.clone();
        }
        use ArmMode::*;
        use EvictionPolicy::*;
        match self.kind {
            ExperimentKind::Efficiency => vec![
                ArmSection::new("conventional", Conventional, None, false),
                ArmSection::new("buffered", Buffered, None, false),
                ArmSection::new("epoch_oracle", EpochOracle, None, false),
            ],
            ExperimentKind::Correlated => vec![
                ArmSection::new("sequential", Conventional, None, false),
                ArmSection::new("fifo", Buffered, Some(Fifo), false),
                ArmSection::new("minred", Buffered, Some(MinRed), false),
                ArmSection::new("shuffled_oracle", Buffered, Some(Fifo), true),
            ],
            ExperimentKind::Lifelong => vec![
                ArmSection::new("conventional", Conventional, None, false),
                ArmSection::new("fifo", Buffered, Some(Fifo), false),
                ArmSection::new("minred", Buffered, Some(MinRed), false),
            ],
            ExperimentKind::AnalyticsOnly => Vec::new(),
        }
    }

    /// Checks every section against the library's invariants, collecting all
    /// problems rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ValidationErrors> {
        let mut errs = Vec::new();
        let mut push = |field: &str, reason: String| {
            errs.push(FieldError {
                field: field.into(),
                reason,
            })
        };
        let lib = |section: &str, r: streamssl::Result<()>, push: &mut dyn FnMut(&str, String)| {
            if let Err(e) = r {
                match e {
                    streamssl::Error::Config { field, reason } => {
                        push(&format!("{section}.{field}"), reason)
                    }
                    other => push(section, other.to_string()),
                }
            }
        };

        if self.name.trim().is_empty() {
            push("name", "must not be empty".into());
        }
        if self
            .name
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            push("name", "use only ASCII letters, digits, '-' and '_'".into());
        }
        if self.seeds.is_empty() {
            push("seeds", "need at least one seed".into());
        }

        if self.kind == ExperimentKind::AnalyticsOnly {
            let a = self.analytics.clone().unwrap_or_default();
            if a.batch_sizes.iter().any(|&b| b < 2) {
                push(
                    "analytics.batch_sizes",
                    "every batch size must be at least 2".into(),
                );
            }
            if a.p_c.iter().any(|p| !(0.0..=1.0).contains(p)) {
                push("analytics.p_c", "values must lie in [0, 1]".into());
            }
            if a.fifo_factor < 2 {
                push("analytics.fifo_factor", "must be at least 2".into());
            }
            return if errs.is_empty() {
                Ok(())
            } else {
                Err(ValidationErrors(errs))
            };
        }

        let model = match self
            .model
            .class_model(self.seeds.first().copied().unwrap_or(0))
        {
            Ok(m) => Some(m),
            Err(e) => {
                lib("model", Err(e), &mut push);
                None
            }
        };

        let stream_len = match &self.stream {
            None => {
                push(
                    "stream",
                    "training experiments need a [stream] section".into(),
                );
                0
            }
            Some(s) => {
                match s {
                    StreamSection::Iid { length } | StreamSection::Markov { length, .. } => {
                        if *length == 0 {
                            push("stream.length", "must be positive".into());
                        }
                    }
                    StreamSection::Segment {
                        n_seq,
                        num_segments,
                        within_segment_drift,
                    } => {
                        if *n_seq == 0 {
                            push("stream.n_seq", "segments need at least one frame".into());
                        }
                        if *num_segments == 0 {
                            push("stream.num_segments", "must be positive".into());
                        }
                        if !(*within_segment_drift >= 0.0) {
                            push("stream.within_segment_drift", "must be non-negative".into());
                        }
                    }
                    StreamSection::Walk {
                        trajectory_length,
                        num_loops,
                        ..
                    } => {
                        if *trajectory_length == 0 || *num_loops == 0 {
                            push(
                                "stream",
                                "trajectory_length and num_loops must be positive".into(),
                            );
                        }
                    }
                    StreamSection::Partitioned {
                        permutations,
                        num_partitions,
                        ..
                    } => {
                        if *num_partitions < 2 {
                            push("stream.num_partitions", "need at least 2 partitions".into());
                        } else if let Some(m) = &model {
                            for i in 0..permutations.len().max(1) {
                                if let Some(r) = s.partition_schedule(m, i, 0) {
                                    lib("stream", r.map(|_| ()), &mut push);
                                }
                            }
                        }
                    }
                }
                if let StreamSection::Markov { p_c, .. } = s {
                    if !(0.0..=1.0).contains(p_c) {
                        push("stream.p_c", "must lie in [0, 1]".into());
                    }
                }
                if self.kind == ExperimentKind::Lifelong
                    && !matches!(s, StreamSection::Partitioned { .. })
                {
                    push(
                        "stream.kind",
                        "lifelong experiments need a partitioned stream".into(),
                    );
                }
                stream_len(s)
            }
        };

        if self.buffer.capacity < self.learner.batch_size {
            push(
                "buffer.capacity",
                format!(
                    "must hold at least one batch ({} < {})",
                    self.buffer.capacity, self.learner.batch_size
                ),
            );
        }
        if !(0.0..1.0).contains(&self.buffer.alpha) {
            push("buffer.alpha", "must lie in [0, 1)".into());
        }

        let lc = self.learner.learner_config(self.model.dim, 0);
        lib("learner", lc.validate(), &mut push);
        lib(
            "learner.augmentation",
            self.learner.augmentation.validate(),
            &mut push,
        );
        if self.learner.batch_size == 0 {
            push("learner.batch_size", "must be positive".into());
        }
        lib("learner", self.learner.lr_schedule(1).validate(), &mut push);
        lib("bandwidth", self.bandwidth.config().validate(), &mut push);

        let ev = &self.evaluation;
        if ev.checkpoint_fetches.windows(2).any(|w| w[0] >= w[1]) {
            push(
                "evaluation.checkpoint_fetches",
                "must be strictly increasing".into(),
            );
        }
        if stream_len > 0 && self.learner.batch_size > 0 {
            let batches = stream_len.div_ceil(self.learner.batch_size) as u64;
            if ev.checkpoint_fetches.iter().any(|&f| f == 0 || f > batches) {
                push(
                    "evaluation.checkpoint_fetches",
                    format!("positions must lie in 1..={batches}"),
                );
            }
        }
        if ev.checkpoints_per_partition == 0 {
            push(
                "evaluation.checkpoints_per_partition",
                "must be positive".into(),
            );
        }
        if ev.probe_train_per_class == 0 || ev.probe_test_per_class == 0 {
            push(
                "evaluation",
                "probe sets need at least one sample per class".into(),
            );
        }
        if !(ev.probe_tolerance > 0.0) {
            push("evaluation.probe_tolerance", "must be positive".into());
        }

        let arms = self.resolved_arms();
        let mut names = std::collections::HashSet::new();
        for (i, arm) in arms.iter().enumerate() {
            if !names.insert(arm.name.as_str()) {
                push(
                    &format!("arms[{i}].name"),
                    format!("duplicate arm name {:?}", arm.name),
                );
            }
            if arm.name.is_empty() || arm.name.contains(['/', '\\']) {
                push(
                    &format!("arms[{i}].name"),
                    "must be a plain directory name".into(),
                );
            }
            if arm.epochs == Some(0) {
                push(&format!("arms[{i}].epochs"), "must be at least 1".into());
            }
            if arm.epochs.is_some() && arm.mode != ArmMode::EpochOracle {
                push(
                    &format!("arms[{i}].epochs"),
                    "only meaningful for epoch_oracle arms".into(),
                );
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ValidationErrors(errs))
        }
    }
}

/// Number of samples a stream section produces.
pub fn stream_len(s: &StreamSection) -> usize {
    match *s {
        StreamSection::Iid { length } | StreamSection::Markov { length, .. } => length,
        StreamSection::Segment {
            n_seq,
            num_segments,
            ..
        } => n_seq * num_segments,
        StreamSection::Walk {
            trajectory_length,
            num_loops,
            ..
        } => trajectory_length * num_loops,
        StreamSection::Partitioned {
            num_partitions,
            samples_per_partition,
            ..
        } => num_partitions * samples_per_partition,
    }
}
