//! Deterministic, seedable stream sources.
//!
//! Every generator is a pull-based iterator of [`Sample`]s with strictly
//! increasing ids and arrival ticks. Two samples are *correlated* iff they
//! share a [`SourceId`]; this makes correlation likelihoods exactly
//! measurable on synthetic data.

mod model;
mod partition;

pub use model::{ClassModel, ClassModelConfig, Hierarchy, TreeNode, MIN_SEPARATION_RATIO};
pub use partition::{partition_classes, PartitionSchedule};

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SourceId = u64;

/// One stream element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub payload: Vec<f64>,
    /// Latent generator identity; equal sources mean correlated samples.
    pub source: SourceId,
    /// Evaluation-only label. Never reaches the self-supervised loss.
    pub class_label: usize,
    pub arrival_tick: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentStreamConfig {
    /// Frames per segment.
    pub n_seq: usize,
    /// Per-coordinate step scale of the within-segment random walk,
    /// relative to the class model's within-class scale.
    pub within_segment_drift: f64,
    pub num_segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovStreamConfig {
    /// Probability that the next sample continues the current chain.
    pub p_c: f64,
    /// Per-coordinate drift step along a chain, relative to the within-class scale.
    #[serde(default = "default_chain_drift")]
    pub drift: f64,
}

fn default_chain_drift() -> f64 {
    0.05
}

impl MarkovStreamConfig {
    pub fn new(p_c: f64) -> Self {
        MarkovStreamConfig {
            p_c,
            drift: default_chain_drift(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkStreamConfig {
    pub trajectory_length: usize,
    pub num_loops: usize,
    /// Mean number of consecutive frames spent in one class region.
    #[serde(default = "default_dwell")]
    pub mean_dwell: f64,
    #[serde(default = "default_chain_drift")]
    pub drift: f64,
}

fn default_dwell() -> f64 {
    32.0
}

impl WalkStreamConfig {
    pub fn new(trajectory_length: usize, num_loops: usize) -> Self {
        WalkStreamConfig {
            trajectory_length,
            num_loops,
            mean_dwell: default_dwell(),
            drift: default_chain_drift(),
        }
    }
}

/// Offset of a correlated chain from its class mean. Each coordinate
/// performs a Gaussian random walk reflected into `[-radius, radius]`.
#[derive(Clone, Debug)]
struct Chain {
    source: SourceId,
    class: usize,
    offset: Vec<f64>,
    remaining: usize,
}

fn reflect(mut x: f64, radius: f64) -> f64 {
    if radius <= 0.0 {
        return 0.0;
    }
    // Folding is periodic with period 4r.
    let period = 4.0 * radius;
    x = (x + radius).rem_euclid(period);
    if x > 2.0 * radius {
        x = period - x;
    }
    x - radius
}

enum Generator {
    Iid,
    Segment {
        cfg: SegmentStreamConfig,
        chain: Option<Chain>,
    },
    Markov {
        cfg: MarkovStreamConfig,
        chain: Option<Chain>,
    },
    Partitioned {
        sched: PartitionSchedule,
    },
    Replay {
        frames: Arc<Vec<Frame>>,
    },
}

/// Payload, source and class of one recorded position.
#[derive(Clone, Debug)]
struct Frame {
    payload: Vec<f64>,
    source: SourceId,
    class: usize,
}

/// A finite, deterministic stream of samples.
pub struct StreamSource {
    model: Arc<ClassModel>,
    generator: Generator,
    rng: ChaCha8Rng,
    len: usize,
    emitted: usize,
    next_source: SourceId,
}

impl std::fmt::Debug for StreamSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamSource")
            .field("len", &self.len)
            .field("emitted", &self.emitted)
            .finish_non_exhaustive()
    }
}

impl StreamSource {
    fn new(model: Arc<ClassModel>, generator: Generator, len: usize, seed: u64) -> Self {
        StreamSource {
            model,
            generator,
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
            emitted: 0,
            next_source: 0,
        }
    }

    pub fn model(&self) -> &Arc<ClassModel> {
        &self.model
    }

    /// Total number of samples the stream will produce.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn remaining(&self) -> usize {
        self.len - self.emitted
    }

    /// Pulls up to `n` samples.
    pub fn next_batch(&mut self, n: usize) -> Vec<Sample> {
        self.by_ref().take(n).collect()
    }

    /// Materialises the remaining stream in shuffled order, keeping payloads,
    /// sources and labels but renumbering ids and ticks. The result carries
    /// the same data with temporal correlations destroyed.
    pub fn shuffled(mut self, seed: u64) -> StreamSource {
        let mut frames: Vec<Frame> = self
            .by_ref()
            .map(|s| Frame {
                payload: s.payload,
                source: s.source,
                class: s.class_label,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        frames.shuffle(&mut rng);
        let len = frames.len();
        StreamSource::new(
            self.model,
            Generator::Replay {
                frames: Arc::new(frames),
            },
            len,
            seed,
        )
    }

    fn fresh_source(&mut self) -> SourceId {
        let s = self.next_source;
        self.next_source += 1;
        s
    }

    fn fresh_chain(&mut self, remaining: usize) -> Chain {
        let class = self.rng.random_range(0..self.model.num_classes());
        let sigma = self.model.within_class_scale();
        let radius = 2.0 * sigma;
        let offset = (0..self.model.dim())
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                reflect(sigma * e, radius)
            })
            .collect();
        Chain {
            source: self.fresh_source(),
            class,
            offset,
            remaining,
        }
    }

    fn step_chain(chain: &mut Chain, step: f64, radius: f64, rng: &mut ChaCha8Rng) {
        for o in chain.offset.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *o = reflect(*o + step * e, radius);
        }
    }

    fn chain_payload(&self, chain: &Chain) -> Vec<f64> {
        self.model
            .mean(chain.class)
            .iter()
            .zip(&chain.offset)
            .map(|(m, o)| m + o)
            .collect()
    }

    fn generate(&mut self) -> Frame {
        let sigma = self.model.within_class_scale();
        let radius = 2.0 * sigma;
        // Temporarily take the generator to satisfy the borrow checker.
        let mut generator = std::mem::replace(&mut self.generator, Generator::Iid);
        let frame = match &mut generator {
            Generator::Iid => {
                let class = self.rng.random_range(0..self.model.num_classes());
                Frame {
                    payload: self.model.draw(class, &mut self.rng),
                    source: self.fresh_source(),
                    class,
                }
            }
            Generator::Segment { cfg, chain } => {
                match chain {
                    Some(c) if c.remaining > 0 => {
                        Self::step_chain(c, cfg.within_segment_drift * sigma, radius, &mut self.rng)
                    }
                    _ => *chain = Some(self.fresh_chain(cfg.n_seq)),
                }
                let c = chain.as_mut().expect("chain set above");
                c.remaining -= 1;
                Frame {
                    payload: self.chain_payload(c),
                    source: c.source,
                    class: c.class,
                }
            }
            Generator::Markov { cfg, chain } => {
                let p_c = cfg.p_c;
                let continue_chain = chain.is_some() && self.rng.random_bool(p_c);
                if continue_chain {
                    let c = chain.as_mut().expect("checked");
                    Self::step_chain(c, cfg.drift * sigma, radius, &mut self.rng);
                } else {
                    *chain = Some(self.fresh_chain(usize::MAX));
                }
                let c = chain.as_ref().expect("chain set above");
                Frame {
                    payload: self.chain_payload(c),
                    source: c.source,
                    class: c.class,
                }
            }
            Generator::Partitioned { sched } => {
                let probs = sched.probabilities(self.emitted);
                let u: f64 = self.rng.random();
                let mut acc = 0.0;
                let mut part = probs.len() - 1;
                for (k, &p) in probs.iter().enumerate() {
                    acc += p;
                    if p > 0.0 && u < acc {
                        part = k;
                        break;
                    }
                }
                // Guard against round-off picking a zero-probability tail.
                if probs[part] == 0.0 {
                    part = probs.iter().rposition(|&p| p > 0.0).expect("normalised");
                }
                let classes = &sched.partitions[part];
                let class = classes[self.rng.random_range(0..classes.len())];
                Frame {
                    payload: self.model.draw(class, &mut self.rng),
                    source: self.fresh_source(),
                    class,
                }
            }
            Generator::Replay { frames } => frames[self.emitted % frames.len()].clone(),
        };
        self.generator = generator;
        frame
    }
}

impl Iterator for StreamSource {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        if self.emitted >= self.len {
            return None;
        }
        let frame = self.generate();
        let position = self.emitted as u64;
        self.emitted += 1;
        Some(Sample {
            id: position,
            payload: frame.payload,
            source: frame.source,
            class_label: frame.class,
            arrival_tick: position,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = self.remaining();
        (r, Some(r))
    }
}

impl ExactSizeIterator for StreamSource {}

/// Each sample draws a uniform class and a fresh source.
pub fn make_iid_stream(model: Arc<ClassModel>, length: usize, seed: u64) -> Result<StreamSource> {
    if length == 0 {
        return Err(Error::config("length", "stream length must be at least 1"));
    }
    Ok(StreamSource::new(model, Generator::Iid, length, seed))
}

/// Concatenated segments of `n_seq` frames; every frame of a segment shares
/// one source and class and drifts slowly around the class mean.
pub fn make_segment_stream(
    model: Arc<ClassModel>,
    cfg: &SegmentStreamConfig,
    seed: u64,
) -> Result<StreamSource> {
    if cfg.n_seq == 0 {
        return Err(Error::config("n_seq", "segments need at least one frame"));
    }
    if cfg.num_segments == 0 {
        return Err(Error::config("num_segments", "must be positive"));
    }
    if !(cfg.within_segment_drift >= 0.0 && cfg.within_segment_drift.is_finite()) {
        return Err(Error::config("within_segment_drift", "must be non-negative"));
    }
    let len = cfg.n_seq * cfg.num_segments;
    Ok(StreamSource::new(
        model,
        Generator::Segment {
            cfg: cfg.clone(),
            chain: None,
        },
        len,
        seed,
    ))
}

/// Markov-correlated stream: each step continues the previous chain with
/// probability `p_c` and otherwise starts a new one.
pub fn make_markov_stream(
    model: Arc<ClassModel>,
    cfg: &MarkovStreamConfig,
    length: usize,
    seed: u64,
) -> Result<StreamSource> {
    if !(0.0..=1.0).contains(&cfg.p_c) {
        return Err(Error::config("p_c", "must lie in [0, 1]"));
    }
    if !(cfg.drift >= 0.0 && cfg.drift.is_finite()) {
        return Err(Error::config("drift", "must be non-negative"));
    }
    if length == 0 {
        return Err(Error::config("length", "stream length must be at least 1"));
    }
    Ok(StreamSource::new(
        model,
        Generator::Markov {
            cfg: cfg.clone(),
            chain: None,
        },
        length,
        seed,
    ))
}

/// One random-walk trajectory through neighbouring class regions, replayed
/// `num_loops` times. The walk dwells in a region for a geometric number of
/// frames (one source per dwell), then steps to an adjacent class in DFS order.
pub fn make_walk_stream(model: Arc<ClassModel>, cfg: &WalkStreamConfig, seed: u64) -> Result<StreamSource> {
    if cfg.num_loops == 0 {
        return Err(Error::config("num_loops", "must be at least 1"));
    }
    if cfg.trajectory_length == 0 {
        return Err(Error::config("trajectory_length", "must be at least 1"));
    }
    if !(cfg.mean_dwell >= 1.0) {
        return Err(Error::config("mean_dwell", "must be at least 1"));
    }
    let mut src = StreamSource::new(model.clone(), Generator::Iid, 0, seed);
    let n = model.num_classes();
    let sigma = model.within_class_scale();
    let leave_prob = 1.0 / cfg.mean_dwell;
    let mut chain = src.fresh_chain(usize::MAX);
    let mut frames = Vec::with_capacity(cfg.trajectory_length);
    for t in 0..cfg.trajectory_length {
        if t > 0 {
            if src.rng.random_bool(leave_prob) {
                let class = chain.class;
                let next = if class == 0 {
                    1
                } else if class == n - 1 || src.rng.random_bool(0.5) {
                    class - 1
                } else {
                    class + 1
                };
                chain.class = next;
                chain.source = src.fresh_source();
            }
            StreamSource::step_chain(&mut chain, cfg.drift * sigma, 2.0 * sigma, &mut src.rng);
        }
        frames.push(Frame {
            payload: src.chain_payload(&chain),
            source: chain.source,
            class: chain.class,
        });
    }
    let len = cfg.trajectory_length * cfg.num_loops;
    Ok(StreamSource::new(
        model,
        Generator::Replay {
            frames: Arc::new(frames),
        },
        len,
        seed,
    ))
}

/// Non-stationary stream over class partitions presented in
/// `sched.permutation` order with linear transitions between them.
pub fn make_partitioned_stream(
    model: Arc<ClassModel>,
    sched: &PartitionSchedule,
    seed: u64,
) -> Result<StreamSource> {
    sched.validate(&model)?;
    let len = sched.total_len();
    Ok(StreamSource::new(
        model,
        Generator::Partitioned {
            sched: sched.clone(),
        },
        len,
        seed,
    ))
}

/// Writes an audit log of samples as CSV:
/// `id,source,class_label,arrival_tick,x0,…,x{d-1}`.
pub fn write_sample_log<'a, W, I>(writer: W, samples: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Sample>,
{
    let mut out = csv::Writer::from_writer(writer);
    let mut header_written = false;
    for s in samples {
        if !header_written {
            let mut header: Vec<String> = ["id", "source", "class_label", "arrival_tick"]
                .iter()
                .map(|h| h.to_string())
                .collect();
            header.extend((0..s.payload.len()).map(|k| format!("x{k}")));
            out.write_record(&header).map_err(csv_err)?;
            header_written = true;
        }
        let mut row = vec![
            s.id.to_string(),
            s.source.to_string(),
            s.class_label.to_string(),
            s.arrival_tick.to_string(),
        ];
        row.extend(s.payload.iter().map(|x| format!("{x:e}")));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(n: usize) -> Arc<ClassModel> {
        Arc::new(
            ClassModel::new(&ClassModelConfig {
                num_classes: n,
                ..Default::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn iid_ids_and_ticks() {
        let s: Vec<Sample> = make_iid_stream(model(2), 4, 7).unwrap().collect();
        assert_eq!(s.len(), 4);
        for (i, x) in s.iter().enumerate() {
            assert_eq!(x.id, i as u64);
            assert_eq!(x.arrival_tick, i as u64);
            assert!(x.class_label < 2);
            assert!(x.payload.iter().all(|v| v.is_finite()));
        }
        let sources: std::collections::HashSet<_> = s.iter().map(|x| x.source).collect();
        assert_eq!(sources.len(), 4);
    }

    #[test]
    fn iid_is_deterministic() {
        let a: Vec<Sample> = make_iid_stream(model(2), 50, 7).unwrap().collect();
        let b: Vec<Sample> = make_iid_stream(model(2), 50, 7).unwrap().collect();
        let c: Vec<Sample> = make_iid_stream(model(2), 50, 8).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_length_rejected() {
        assert!(make_iid_stream(model(2), 0, 0).is_err());
        assert!(make_markov_stream(model(2), &MarkovStreamConfig::new(0.5), 0, 0).is_err());
    }

    #[test]
    fn segment_structure() {
        let cfg = SegmentStreamConfig {
            n_seq: 64,
            within_segment_drift: 0.05,
            num_segments: 10,
        };
        let s: Vec<Sample> = make_segment_stream(model(4), &cfg, 1).unwrap().collect();
        assert_eq!(s.len(), 640);
        let runs = source_runs(&s);
        assert_eq!(runs.len(), 10);
        assert!(runs.iter().all(|&(_, len)| len == 64));
        let distinct: std::collections::HashSet<_> = s.iter().map(|x| x.source).collect();
        assert_eq!(distinct.len(), 10);
        for chunk in s.chunks(64) {
            assert!(chunk.iter().all(|x| x.class_label == chunk[0].class_label));
        }
    }

    #[test]
    fn segment_of_one_is_iid_like() {
        let cfg = SegmentStreamConfig {
            n_seq: 1,
            within_segment_drift: 0.0,
            num_segments: 100,
        };
        let s: Vec<Sample> = make_segment_stream(model(4), &cfg, 1).unwrap().collect();
        let distinct: std::collections::HashSet<_> = s.iter().map(|x| x.source).collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn segment_n_seq_zero_is_error() {
        let cfg = SegmentStreamConfig {
            n_seq: 0,
            within_segment_drift: 0.0,
            num_segments: 1,
        };
        assert!(matches!(make_segment_stream(model(2), &cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn segment_payloads_stay_within_reflection_box() {
        let m = model(4);
        let cfg = SegmentStreamConfig {
            n_seq: 200,
            within_segment_drift: 0.5,
            num_segments: 5,
        };
        for s in make_segment_stream(m.clone(), &cfg, 3).unwrap() {
            for (x, mu) in s.payload.iter().zip(m.mean(s.class_label)) {
                assert!((x - mu).abs() <= 2.0 * m.within_class_scale() + 1e-12);
            }
        }
    }

    #[test]
    fn markov_extremes() {
        let m = model(4);
        let s: Vec<Sample> = make_markov_stream(m.clone(), &MarkovStreamConfig::new(0.0), 500, 1)
            .unwrap()
            .collect();
        let distinct: std::collections::HashSet<_> = s.iter().map(|x| x.source).collect();
        assert_eq!(distinct.len(), 500);
        let s: Vec<Sample> = make_markov_stream(m, &MarkovStreamConfig::new(1.0), 500, 1)
            .unwrap()
            .collect();
        assert!(s.iter().all(|x| x.source == s[0].source));
    }

    #[test]
    fn walk_loops_repeat_exactly() {
        let cfg = WalkStreamConfig::new(300, 10);
        let s: Vec<Sample> = make_walk_stream(model(8), &cfg, 5).unwrap().collect();
        assert_eq!(s.len(), 3000);
        for t in 0..(s.len() - 300) {
            assert_eq!(s[t].payload, s[t + 300].payload);
            assert_eq!(s[t].source, s[t + 300].source);
            assert_eq!(s[t].class_label, s[t + 300].class_label);
            assert_eq!(s[t + 300].id, s[t].id + 300);
        }
        let single: Vec<Sample> = make_walk_stream(model(8), &WalkStreamConfig::new(300, 1), 5)
            .unwrap()
            .collect();
        assert_eq!(single.len(), 300);
    }

    #[test]
    fn walk_over_two_classes_visits_both() {
        let mut cfg = WalkStreamConfig::new(1000, 1);
        cfg.mean_dwell = 20.0;
        let s: Vec<Sample> = make_walk_stream(model(2), &cfg, 9).unwrap().collect();
        let labels: std::collections::HashSet<_> = s.iter().map(|x| x.class_label).collect();
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn shuffled_keeps_multiset_and_renumbers() {
        let cfg = SegmentStreamConfig {
            n_seq: 8,
            within_segment_drift: 0.05,
            num_segments: 20,
        };
        let orig: Vec<Sample> = make_segment_stream(model(4), &cfg, 2).unwrap().collect();
        let shuf: Vec<Sample> = make_segment_stream(model(4), &cfg, 2)
            .unwrap()
            .shuffled(11)
            .collect();
        assert_eq!(shuf.len(), orig.len());
        assert!(shuf.iter().enumerate().all(|(i, s)| s.id == i as u64));
        let mut a: Vec<(u64, usize)> = orig.iter().map(|s| (s.source, s.class_label)).collect();
        let mut b: Vec<(u64, usize)> = shuf.iter().map(|s| (s.source, s.class_label)).collect();
        assert_ne!(a, b);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn reflection_keeps_values_in_box() {
        for x in [-17.3, -4.1, -2.0, -0.5, 0.0, 1.9, 2.0, 2.5, 6.0, 13.7] {
            let r = reflect(x, 2.0);
            assert!((-2.0..=2.0).contains(&r), "{x} -> {r}");
        }
        assert_eq!(reflect(2.5, 2.0), 1.5);
        assert_eq!(reflect(-2.5, 2.0), -1.5);
        assert_eq!(reflect(1.0, 2.0), 1.0);
    }

    #[test]
    fn sample_log_has_header_and_rows() {
        let s: Vec<Sample> = make_iid_stream(model(2), 3, 7).unwrap().collect();
        let mut buf = Vec::new();
        write_sample_log(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("id,source,class_label,arrival_tick,x0,x1"));
        assert_eq!(lines[1].split(',').count(), 4 + 32);
    }

    pub(crate) fn source_runs(s: &[Sample]) -> Vec<(SourceId, usize)> {
        let mut runs: Vec<(SourceId, usize)> = Vec::new();
        for x in s {
            match runs.last_mut() {
                Some((src, len)) if *src == x.source => *len += 1,
                _ => runs.push((x.source, 1)),
            }
        }
        runs
    }
}
