//! Virtual-clock training loop coupling a stream, an optional replay buffer
//! and a learner under a data/optimisation bandwidth budget.
//!
//! One tick is the unit of virtual time. Fetching a stream batch takes
//! `t_data` ticks and one optimisation step takes `t_opt` ticks. Fetching
//! overlaps with training, so after the first batch arrives every cycle
//! lasts `max(t_data, K·t_opt)`: `K·t_opt` ticks of training and the rest
//! idle. The first `t_data` ticks, spent waiting for data before any step can
//! run, are counted as fetch ticks. The epoch oracle instead downloads the
//! whole stream up front and then trains without interruption.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::pair_correlation;
use crate::buffer::{Grouping, ReplayBuffer};
use crate::error::{Error, Result};
use crate::learner::{linear_probe, AugmentationConfig, LearnerState, LrSchedule, ProbeConfig};
use crate::streams::{ClassModel, Sample, StreamSource};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthConfig {
    pub t_data: u64,
    #[serde(default = "one")]
    pub t_opt: u64,
    /// Training steps per fetched stream batch (buffered mode only).
    #[serde(default = "one_usize")]
    pub hyper_sampling_k: usize,
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

impl BandwidthConfig {
    pub fn new(t_data: u64, t_opt: u64, hyper_sampling_k: usize) -> Self {
        BandwidthConfig {
            t_data,
            t_opt,
            hyper_sampling_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_data == 0 {
            return Err(Error::config("t_data", "must be at least 1"));
        }
        if self.t_opt == 0 {
            return Err(Error::config("t_opt", "must be at least 1"));
        }
        if self.hyper_sampling_k == 0 {
            return Err(Error::config("hyper_sampling_k", "must be at least 1"));
        }
        Ok(())
    }

    /// Idle ticks per conventional cycle.
    pub fn t_idle(&self) -> u64 {
        self.t_data.saturating_sub(self.t_opt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunMode {
    /// One step per stream batch, which is then discarded.
    Conventional,
    /// Every stream batch enters the buffer, then `K` steps on buffer samples.
    Buffered,
    /// Stores the whole stream and trains on shuffled passes over it. Not a
    /// streaming method; reference only.
    EpochOracle { epochs: usize },
}

impl RunMode {
    pub fn label(&self) -> &'static str {
        match self {
            RunMode::Conventional => "conventional",
            RunMode::Buffered => "buffered",
            RunMode::EpochOracle { .. } => "epoch_oracle (non-streaming)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub bandwidth: BandwidthConfig,
    pub batch_size: usize,
    pub augmentation: AugmentationConfig,
    pub schedule: LrSchedule,
    /// Initialise the tracked feature of each new buffer entry with its
    /// embedding under the current encoder.
    #[serde(default = "default_true")]
    pub embed_on_ingest: bool,
    /// Checkpoint positions in elapsed ticks.
    #[serde(default)]
    pub checkpoints: Vec<u64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.bandwidth.validate()?;
        self.augmentation.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if let RunMode::EpochOracle { epochs } = self.mode {
            if epochs == 0 {
                return Err(Error::config("epochs", "must be at least 1"));
            }
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("checkpoints", "must be strictly increasing"));
        }
        Ok(())
    }

    /// Number of optimisation steps a run over `stream_len` samples performs.
    pub fn planned_steps(&self, stream_len: usize) -> u64 {
        let batches = stream_len.div_ceil(self.batch_size) as u64;
        match self.mode {
            RunMode::Conventional => batches,
            RunMode::Buffered => batches * self.bandwidth.hyper_sampling_k as u64,
            RunMode::EpochOracle { epochs } => batches * epochs as u64,
        }
    }

    /// Elapsed ticks once `fetches` stream batches have been trained on.
    /// For the oracle, `fetches` counts training batches after the download.
    pub fn ticks_after(&self, fetches: u64, stream_len: usize) -> u64 {
        let bw = &self.bandwidth;
        match self.mode {
            RunMode::Conventional => bw.t_data + fetches * bw.t_data.max(bw.t_opt),
            RunMode::Buffered => {
                bw.t_data + fetches * bw.t_data.max(bw.hyper_sampling_k as u64 * bw.t_opt)
            }
            RunMode::EpochOracle { .. } => {
                stream_len.div_ceil(self.batch_size) as u64 * bw.t_data + fetches * bw.t_opt
            }
        }
    }
}

/// Read-only view handed to an [`Evaluator`] at each checkpoint.
pub struct EvalContext<'a> {
    pub learner: &'a LearnerState,
    pub buffer: Option<&'a ReplayBuffer>,
    pub tick: u64,
    pub samples_fetched: usize,
}

/// Metrics computed at every checkpoint.
pub trait Evaluator {
    /// Column names, in the order `evaluate` returns values.
    fn metric_names(&self) -> Vec<String>;
    fn evaluate(&mut self, ctx: &EvalContext<'_>) -> Result<Vec<f64>>;
}

/// Evaluator with no metrics.
pub struct NoEvaluation;

impl Evaluator for NoEvaluation {
    fn metric_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn evaluate(&mut self, _: &EvalContext<'_>) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

/// Linear probe on frozen encoder outputs, reporting overall accuracy and
/// accuracy per class group.
pub struct ProbeEvaluator {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    pub groups: Vec<Vec<usize>>,
    pub config: ProbeConfig,
}

impl ProbeEvaluator {
    /// Fresh IID train and test sets with `per_class` samples of every class.
    /// The two sets are drawn from independent seeds.
    pub fn from_model(
        model: &ClassModel,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
        groups: Vec<Vec<usize>>,
        config: ProbeConfig,
    ) -> Self {
        let set = |per, s| {
            let (xs, ys) = model.labelled_set(per, s);
            xs.into_iter()
                .zip(ys)
                .enumerate()
                .map(|(i, (payload, class_label))| Sample {
                    id: i as u64,
                    payload,
                    source: i as u64,
                    class_label,
                    arrival_tick: 0,
                })
                .collect()
        };
        ProbeEvaluator {
            train: set(train_per_class, seed),
            test: set(test_per_class, seed ^ 0x9e37_79b9_7f4a_7c15),
            num_classes: model.num_classes(),
            groups,
            config,
        }
    }
}

impl Evaluator for ProbeEvaluator {
    fn metric_names(&self) -> Vec<String> {
        let mut names = vec!["probe_accuracy".to_string()];
        names.extend((0..self.groups.len()).map(|g| format!("probe_accuracy_group{g}")));
        names
    }

    fn evaluate(&mut self, ctx: &EvalContext<'_>) -> Result<Vec<f64>> {
        let embed = |set: &[Sample]| -> Vec<Vec<f64>> {
            set.iter().map(|s| ctx.learner.embed(&s.payload)).collect()
        };
        let labels = |set: &[Sample]| -> Vec<usize> { set.iter().map(|s| s.class_label).collect() };
        let result = linear_probe(
            &embed(&self.train),
            &labels(&self.train),
            &embed(&self.test),
            &labels(&self.test),
            self.num_classes,
            &self.config,
        )?;
        let mut out = vec![result.overall];
        out.extend(
            result
                .group_accuracy(&self.groups)
                .into_iter()
                .map(|a| a.unwrap_or(f64::NAN)),
        );
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub tick: u64,
    pub step_count: u64,
    pub stream_batches_fetched: u64,
    pub samples_fetched: usize,
    pub fetch_ticks: u64,
    pub train_ticks: u64,
    pub idle_ticks: u64,
    pub buffer_len: usize,
    /// Buffer entries per class label.
    pub buffer_composition: BTreeMap<usize, usize>,
    /// Mean fraction of same-source pairs over the training batches since
    /// the previous checkpoint.
    pub within_batch_correlation: Option<f64>,
    /// Mean training loss since the previous checkpoint.
    pub mean_loss: Option<f64>,
    pub metrics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub mode: RunMode,
    pub bandwidth: BandwidthConfig,
    pub batch_size: usize,
    pub metric_names: Vec<String>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub elapsed_ticks: u64,
    pub fetch_ticks: u64,
    pub train_ticks: u64,
    pub idle_ticks: u64,
    pub training_steps: u64,
    pub stream_batches_fetched: u64,
    pub unique_samples_fetched: usize,
    /// Largest number of times any sample was read from the stream or from
    /// a stored copy of it. Replay from the buffer does not count.
    pub max_reads_per_sample: u32,
    /// Declared checkpoints the run never reached.
    pub unreached_checkpoints: Vec<u64>,
    /// Set when training stopped early, e.g. on a non-finite loss.
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn idle_fraction(&self) -> f64 {
        let active = self.train_ticks + self.idle_ticks;
        if active == 0 {
            0.0
        } else {
            self.idle_ticks as f64 / active as f64
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// True iff no stream sample was read more than once.
pub fn single_pass_guarantee(log: &RunLog) -> bool {
    log.max_reads_per_sample <= 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataUsage {
    pub unique_samples_fetched: usize,
    pub training_steps: u64,
    pub effective_hyper_sampling: f64,
}

pub fn data_usage(log: &RunLog) -> DataUsage {
    DataUsage {
        unique_samples_fetched: log.unique_samples_fetched,
        training_steps: log.training_steps,
        effective_hyper_sampling: if log.stream_batches_fetched == 0 {
            0.0
        } else {
            log.training_steps as f64 / log.stream_batches_fetched as f64
        },
    }
}

/// Appends one CSV row per checkpoint and flushes after each, so a crashed
/// run keeps every completed checkpoint.
pub struct CsvSink<W: Write> {
    writer: W,
    header_written: bool,
}

impl<W: Write> CsvSink<W> {
    pub fn new(writer: W) -> Self {
        CsvSink {
            writer,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }

    fn write(&mut self, metric_names: &[String], rec: &CheckpointRecord) -> Result<()> {
        if !self.header_written {
            let mut cols: Vec<String> = [
                "tick",
                "step_count",
                "stream_batches_fetched",
                "samples_fetched",
                "fetch_ticks",
                "train_ticks",
                "idle_ticks",
                "buffer_len",
                "within_batch_correlation",
                "mean_loss",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            cols.extend(metric_names.iter().cloned());
            cols.push("buffer_composition".into());
            writeln!(self.writer, "{}", cols.join(","))?;
            self.header_written = true;
        }
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = vec![
            rec.tick.to_string(),
            rec.step_count.to_string(),
            rec.stream_batches_fetched.to_string(),
            rec.samples_fetched.to_string(),
            rec.fetch_ticks.to_string(),
            rec.train_ticks.to_string(),
            rec.idle_ticks.to_string(),
            rec.buffer_len.to_string(),
            opt(rec.within_batch_correlation),
            opt(rec.mean_loss),
        ];
        row.extend(rec.metrics.iter().map(|m| m.to_string()));
        let comp: Vec<String> = rec
            .buffer_composition
            .iter()
            .map(|(c, n)| format!("{c}:{n}"))
            .collect();
        row.push(comp.join(" "));
        writeln!(self.writer, "{}", row.join(","))?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Everything a run hands back: the log plus the final learner and buffer.
pub struct RunOutcome {
    pub log: RunLog,
    pub learner: LearnerState,
    pub buffer: Option<ReplayBuffer>,
}

struct Clock {
    fetch: u64,
    train: u64,
    idle: u64,
}

impl Clock {
    fn elapsed(&self) -> u64 {
        self.fetch + self.train + self.idle
    }
}

struct Runner<'a, W: Write> {
    cfg: &'a RunConfig,
    learner: LearnerState,
    buffer: Option<ReplayBuffer>,
    evaluator: &'a mut dyn Evaluator,
    sink: Option<&'a mut CsvSink<W>>,
    metric_names: Vec<String>,
    rng: ChaCha8Rng,
    clock: Clock,
    reads: HashMap<u64, u32>,
    batches_fetched: u64,
    samples_fetched: usize,
    pending: std::collections::VecDeque<u64>,
    records: Vec<CheckpointRecord>,
    corr_sum: f64,
    corr_n: usize,
    loss_sum: f64,
    loss_n: usize,
    aborted: Option<String>,
}

impl<'a, W: Write> Runner<'a, W> {
    fn note_reads(&mut self, batch: &[Sample]) {
        for s in batch {
            *self.reads.entry(s.id).or_insert(0) += 1;
        }
        self.samples_fetched += batch.len();
    }

    /// One optimisation step; returns false once training has aborted.
    fn step(&mut self, batch: &[Sample]) -> bool {
        let seed = self.rng.random::<u64>();
        match self
            .learner
            .train_step(batch, &self.cfg.augmentation, &self.cfg.schedule, seed)
        {
            Ok(out) => {
                self.clock.train += self.cfg.bandwidth.t_opt;
                self.loss_sum += out.loss;
                self.loss_n += 1;
                if let Some(c) = pair_correlation(batch.iter().map(|s| s.source)) {
                    self.corr_sum += c;
                    self.corr_n += 1;
                }
                if let Some(buf) = self.buffer.as_mut() {
                    let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
                    if let Err(e) = buf.track_features(&ids, &out.embeddings) {
                        self.aborted = Some(e.to_string());
                        return false;
                    }
                }
                true
            }
            Err(e) => {
                log::error!("training aborted: {e}");
                self.aborted = Some(e.to_string());
                false
            }
        }
    }

    /// Emits every pending checkpoint at or before the current tick.
    fn checkpoint(&mut self) -> Result<()> {
        let now = self.clock.elapsed();
        let mut due = false;
        while self.pending.front().is_some_and(|&t| t <= now) {
            self.pending.pop_front();
            due = true;
        }
        if due {
            self.record()?;
        }
        Ok(())
    }

    fn record(&mut self) -> Result<()> {
        let now = self.clock.elapsed();
        if self.records.last().is_some_and(|r| r.tick >= now) {
            return Ok(());
        }
        let ctx = EvalContext {
            learner: &self.learner,
            buffer: self.buffer.as_ref(),
            tick: now,
            samples_fetched: self.samples_fetched,
        };
        let metrics = self.evaluator.evaluate(&ctx)?;
        let composition = self
            .buffer
            .as_ref()
            .map(|b| {
                b.composition(Grouping::ByClass)
                    .into_iter()
                    .map(|(k, v)| (k as usize, v))
                    .collect()
            })
            .unwrap_or_default();
        let rec = CheckpointRecord {
            tick: now,
            step_count: self.learner.step_count(),
            stream_batches_fetched: self.batches_fetched,
            samples_fetched: self.samples_fetched,
            fetch_ticks: self.clock.fetch,
            train_ticks: self.clock.train,
            idle_ticks: self.clock.idle,
            buffer_len: self.buffer.as_ref().map_or(0, |b| b.len()),
            buffer_composition: composition,
            within_batch_correlation: (self.corr_n > 0).then(|| self.corr_sum / self.corr_n as f64),
            mean_loss: (self.loss_n > 0).then(|| self.loss_sum / self.loss_n as f64),
            metrics,
        };
        self.corr_sum = 0.0;
        self.corr_n = 0;
        self.loss_sum = 0.0;
        self.loss_n = 0;
        if let Some(sink) = self.sink.as_mut() {
            sink.write(&self.metric_names, &rec)?;
        }
        self.records.push(rec);
        Ok(())
    }

    fn ingest(&mut self, batch: Vec<Sample>) -> Result<()> {
        let buf = self.buffer.as_mut().expect("buffered mode has a buffer");
        let embeddings: Option<(Vec<u64>, Vec<Vec<f64>>)> = self.cfg.embed_on_ingest.then(|| {
            (
                batch.iter().map(|s| s.id).collect(),
                batch.iter().map(|s| self.learner.embed(&s.payload)).collect(),
            )
        });
        buf.add(batch)?;
        if let Some((ids, z)) = embeddings {
            buf.track_features(&ids, &z)?;
        }
        Ok(())
    }

    fn run_streaming(&mut self, stream: &mut StreamSource) -> Result<()> {
        let bw = self.cfg.bandwidth.clone();
        let b = self.cfg.batch_size;
        let k = match self.cfg.mode {
            RunMode::Buffered => bw.hyper_sampling_k,
            _ => 1,
        };
        let train_ticks = k as u64 * bw.t_opt;
        let idle_per_cycle = bw.t_data.saturating_sub(train_ticks);
        self.clock.fetch += bw.t_data;
        while self.aborted.is_none() {
            let batch = stream.next_batch(b);
            if batch.is_empty() {
                break;
            }
            self.batches_fetched += 1;
            self.note_reads(&batch);
            match self.cfg.mode {
                RunMode::Conventional => {
                    self.step(&batch);
                }
                RunMode::Buffered => {
                    self.ingest(batch)?;
                    for _ in 0..k {
                        let seed = self.rng.random::<u64>();
                        let buf = self.buffer.as_ref().expect("buffered mode has a buffer");
                        let train_batch = buf.sample_batch(b.min(buf.len()), seed)?;
                        if !self.step(&train_batch) {
                            break;
                        }
                    }
                }
                RunMode::EpochOracle { .. } => unreachable!(),
            }
            if self.aborted.is_some() {
                break;
            }
            self.clock.idle += idle_per_cycle;
            self.checkpoint()?;
        }
        Ok(())
    }

    fn run_oracle(&mut self, stream: &mut StreamSource, epochs: usize) -> Result<()> {
        let b = self.cfg.batch_size;
        let mut data = Vec::with_capacity(stream.len());
        loop {
            let batch = stream.next_batch(b);
            if batch.is_empty() {
                break;
            }
            self.batches_fetched += 1;
            self.clock.fetch += self.cfg.bandwidth.t_data;
            data.extend(batch);
        }
        self.checkpoint()?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        'epochs: for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for ids in order.chunks(b) {
                let batch: Vec<Sample> = ids.iter().map(|&i| data[i].clone()).collect();
                self.note_reads(&batch);
                if !self.step(&batch) {
                    break 'epochs;
                }
                self.checkpoint()?;
            }
        }
        Ok(())
    }
}

/// Runs `mode` over `stream`, recording a checkpoint whenever elapsed ticks
/// reach a declared position and once more at the end unless one was just
/// taken.
pub fn run<W: Write>(
    cfg: &RunConfig,
    mut stream: StreamSource,
    buffer: Option<ReplayBuffer>,
    learner: LearnerState,
    evaluator: &mut dyn Evaluator,
    sink: Option<&mut CsvSink<W>>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    match (&cfg.mode, &buffer) {
        (RunMode::Buffered, None) => {
            return Err(Error::config("buffer", "buffered mode requires a buffer"))
        }
        (RunMode::Conventional | RunMode::EpochOracle { .. }, Some(_)) => {
            return Err(Error::config("buffer", "only buffered mode takes a buffer"))
        }
        (RunMode::Buffered, Some(buf)) if buf.capacity() < cfg.batch_size => {
            return Err(Error::config(
                "buffer.capacity",
                format!(
                    "capacity {} is smaller than the training batch {}",
                    buf.capacity(),
                    cfg.batch_size
                ),
            ))
        }
        _ => {}
    }
    if learner.config.input_dim != stream.model().dim() {
        return Err(Error::config(
            "learner.input_dim",
            format!(
                "learner expects {} inputs but the stream has dimension {}",
                learner.config.input_dim,
                stream.model().dim()
            ),
        ));
    }
    let metric_names = evaluator.metric_names();
    let stream_len = stream.len();
    let mut runner = Runner {
        cfg,
        learner,
        buffer,
        evaluator,
        sink,
        metric_names: metric_names.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        clock: Clock {
            fetch: 0,
            train: 0,
            idle: 0,
        },
        reads: HashMap::with_capacity(stream_len),
        batches_fetched: 0,
        samples_fetched: 0,
        pending: cfg.checkpoints.iter().copied().collect(),
        records: Vec::new(),
        corr_sum: 0.0,
        corr_n: 0,
        loss_sum: 0.0,
        loss_n: 0,
        aborted: None,
    };
    match cfg.mode {
        RunMode::EpochOracle { epochs } => runner.run_oracle(&mut stream, epochs)?,
        _ => runner.run_streaming(&mut stream)?,
    }
    if runner.records.last().map(|r| r.tick) != Some(runner.clock.elapsed()) {
        runner.record()?;
    }
    let unreached: Vec<u64> = runner.pending.iter().copied().collect();
    if !unreached.is_empty() {
        log::warn!("run ended before checkpoints {unreached:?}");
    }
    let log = RunLog {
        mode: cfg.mode,
        bandwidth: cfg.bandwidth.clone(),
        batch_size: cfg.batch_size,
        metric_names,
        checkpoints: runner.records,
        elapsed_ticks: runner.clock.elapsed(),
        fetch_ticks: runner.clock.fetch,
        train_ticks: runner.clock.train,
        idle_ticks: runner.clock.idle,
        training_steps: runner.learner.step_count(),
        stream_batches_fetched: runner.batches_fetched,
        unique_samples_fetched: runner.reads.len(),
        max_reads_per_sample: runner.reads.values().copied().max().unwrap_or(0),
        unreached_checkpoints: unreached,
        aborted: runner.aborted,
    };
    Ok(RunOutcome {
        log,
        learner: runner.learner,
        buffer: runner.buffer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::EvictionPolicy;
    use crate::learner::LearnerConfig;
    use crate::streams::{make_iid_stream, ClassModel, ClassModelConfig};
    use std::sync::Arc;

    fn setup(len: usize) -> (StreamSource, LearnerState) {
        let model = Arc::new(ClassModel::new(&ClassModelConfig::default()).unwrap());
        let stream = make_iid_stream(model, len, 1).unwrap();
        let learner = LearnerState::new(LearnerConfig::default()).unwrap();
        (stream, learner)
    }

    fn cfg(mode: RunMode, t_data: u64, k: usize) -> RunConfig {
        RunConfig {
            mode,
            bandwidth: BandwidthConfig::new(t_data, 1, k),
            batch_size: 8,
            augmentation: AugmentationConfig::default(),
            schedule: LrSchedule::Constant { base_lr: 0.01 },
            embed_on_ingest: true,
            checkpoints: vec![],
            seed: 3,
        }
    }

    fn go(c: &RunConfig, len: usize, buffer: Option<ReplayBuffer>) -> RunLog {
        let (stream, learner) = setup(len);
        run::<Vec<u8>>(c, stream, buffer, learner, &mut NoEvaluation, None)
            .unwrap()
            .log
    }

    #[test]
    fn buffered_k_contract() {
        let c = cfg(RunMode::Buffered, 10, 10);
        let log = go(&c, 40, Some(ReplayBuffer::new(16, EvictionPolicy::Fifo).unwrap()));
        assert_eq!(log.stream_batches_fetched, 5);
        assert_eq!(log.training_steps, 50);
        assert_eq!(log.idle_ticks, 0);
        assert_eq!(data_usage(&log).effective_hyper_sampling, 10.0);
        assert!(single_pass_guarantee(&log));
    }

    #[test]
    fn conventional_idles_ninety_percent() {
        let log = go(&cfg(RunMode::Conventional, 10, 1), 80, None);
        assert_eq!(log.training_steps, 10);
        assert!((log.idle_fraction() - 0.9).abs() < 1e-12);
        assert_eq!(log.elapsed_ticks, log.fetch_ticks + log.train_ticks + log.idle_ticks);
        assert!(single_pass_guarantee(&log));
        assert_eq!(data_usage(&log).effective_hyper_sampling, 1.0);
    }

    #[test]
    fn oracle_rereads_data() {
        let log = go(&cfg(RunMode::EpochOracle { epochs: 2 }, 10, 1), 40, None);
        assert!(!single_pass_guarantee(&log));
        assert_eq!(data_usage(&log).effective_hyper_sampling, 2.0);
        assert_eq!(log.idle_ticks, 0);
        assert_eq!(log.elapsed_ticks, 5 * 10 + 10);
    }

    #[test]
    fn checkpoints_increase_and_final_is_recorded() {
        let mut c = cfg(RunMode::Buffered, 4, 2);
        c.checkpoints = vec![4, 9, 20, 10_000];
        let log = go(&c, 64, Some(ReplayBuffer::new(32, EvictionPolicy::MinRed).unwrap()));
        let ticks: Vec<u64> = log.checkpoints.iter().map(|r| r.tick).collect();
        assert!(ticks.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*ticks.last().unwrap(), log.elapsed_ticks);
        assert_eq!(log.unreached_checkpoints, vec![10_000]);
        assert_eq!(c.ticks_after(8, 64), log.elapsed_ticks);
    }

    #[test]
    fn mode_and_buffer_must_agree() {
        let (stream, learner) = setup(16);
        let buf = ReplayBuffer::new(16, EvictionPolicy::Fifo).unwrap();
        let c = cfg(RunMode::Conventional, 1, 1);
        assert!(run::<Vec<u8>>(&c, stream, Some(buf), learner, &mut NoEvaluation, None).is_err());
        let (stream, learner) = setup(16);
        let small = ReplayBuffer::new(4, EvictionPolicy::Fifo).unwrap();
        let c = cfg(RunMode::Buffered, 1, 1);
        assert!(run::<Vec<u8>>(&c, stream, Some(small), learner, &mut NoEvaluation, None).is_err());
    }

    #[test]
    fn csv_rows_match_checkpoints() {
        let mut c = cfg(RunMode::Conventional, 2, 1);
        c.checkpoints = vec![6, 10];
        let (stream, learner) = setup(48);
        let mut sink = CsvSink::new(Vec::new());
        let out = run(&c, stream, None, learner, &mut NoEvaluation, Some(&mut sink)).unwrap();
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 1 + out.log.checkpoints.len());
        assert!(text.starts_with("tick,step_count"));
    }
}
