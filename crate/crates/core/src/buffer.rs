//! Bounded replay buffer with FIFO and minimum-redundancy (MinRed) eviction.
//!
//! MinRed keeps, for every entry, an exponential moving average of its
//! embeddings and evicts the entry whose nearest neighbour (cosine distance)
//! is closest. Nearest-neighbour distances are cached and maintained
//! incrementally, so an eviction costs O(B) instead of O(B²).

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streams::{PartitionSchedule, Sample};

pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    Fifo,
    #[serde(alias = "min_red")]
    MinRed,
}

/// Moving average of a sample's embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedFeature {
    pub value: Vec<f64>,
    pub alpha: f64,
    pub initialized: bool,
}

impl TrackedFeature {
    pub fn new(alpha: f64) -> Self {
        TrackedFeature {
            value: Vec::new(),
            alpha,
            initialized: false,
        }
    }

    /// The first update copies `z`; later ones blend `alpha * value + (1 - alpha) * z`.
    pub fn update(&mut self, z: &[f64]) {
        if self.initialized {
            for (v, &zi) in self.value.iter_mut().zip(z) {
                *v = self.alpha * *v + (1.0 - self.alpha) * zi;
            }
        } else {
            self.value = z.to_vec();
            self.initialized = true;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: Sample,
    pub feature: TrackedFeature,
    pub insert_order: u64,
}

/// Counters for the buffer's silent fallbacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStats {
    pub inserts: u64,
    pub evictions: u64,
    /// Feature updates dropped because the id was no longer buffered.
    pub skipped_updates: u64,
    /// Updates whose embedding had zero norm.
    pub zero_features: u64,
    /// MinRed evictions decided by FIFO order for lack of eligible entries.
    pub fifo_fallbacks: u64,
}

/// How [`ReplayBuffer::composition`] groups entries.
#[derive(Clone, Copy, Debug)]
pub enum Grouping<'a> {
    BySource,
    ByClass,
    /// Keys are partition indices of the schedule.
    ByPartition(&'a PartitionSchedule),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum FeatureState {
    Uninit,
    Zero,
    Unit,
}

/// Normalises `v`; `None` for a zero vector.
fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        Some(v.iter().map(|x| x / norm).collect())
    } else {
        None
    }
}

/// Four-lane dot product. The summation pattern is symmetric in its
/// arguments, so `dot(a, b) == dot(b, a)` bit for bit.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let mut tail = 0.0;
    for (x, y) in a.remainder().iter().zip(b.remainder()) {
        tail += x * y;
    }
    let mut acc = [0.0f64; 4];
    for (x, y) in a.zip(b) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cosine distance `1 - cos(a, b)`. A zero vector is treated as orthogonal to
/// everything (distance 1).
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    match (unit(a), unit(b)) {
        (Some(ua), Some(ub)) => 1.0 - dot(&ua, &ub),
        _ => 1.0,
    }
}

/// Bounded replay buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    policy: EvictionPolicy,
    alpha: f64,
    slots: Vec<Option<BufferEntry>>,
    free: Vec<usize>,
    order: BTreeMap<u64, usize>,
    by_id: HashMap<u64, usize>,
    next_order: u64,
    // MinRed cache, indexed by slot.
    dim: Option<usize>,
    state: Vec<FeatureState>,
    units: Vec<f64>,
    nn_dist: Vec<f64>,
    nn_slot: Vec<usize>,
    /// `nn_dist` is only a lower bound; `nn_slot` is unset.
    dirty: Vec<bool>,
    orders: Vec<u64>,
    eligible: usize,
    stats: BufferStats,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, policy: EvictionPolicy) -> Result<Self> {
        Self::with_alpha(capacity, policy, DEFAULT_ALPHA)
    }

    pub fn with_alpha(capacity: usize, policy: EvictionPolicy, alpha: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("capacity", "buffer capacity must be positive"));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::config("alpha", "EMA coefficient must lie in [0, 1)"));
        }
        Ok(ReplayBuffer {
            capacity,
            policy,
            alpha,
            slots: Vec::with_capacity(capacity),
            free: Vec::new(),
            order: BTreeMap::new(),
            by_id: HashMap::with_capacity(capacity),
            next_order: 0,
            dim: None,
            state: Vec::with_capacity(capacity),
            units: Vec::new(),
            nn_dist: Vec::with_capacity(capacity),
            nn_slot: Vec::with_capacity(capacity),
            dirty: Vec::with_capacity(capacity),
            orders: Vec::with_capacity(capacity),
            eligible: 0,
            stats: BufferStats::default(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn stats(&self) -> BufferStats {
        self.stats
    }

    pub fn contains(&self, id: u64) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Entries in insertion order (oldest first).
    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> + '_ {
        self.order
            .values()
            .map(move |&s| self.slots[s].as_ref().expect("live slot"))
    }

    pub fn get(&self, id: u64) -> Option<&BufferEntry> {
        self.by_id.get(&id).and_then(|&s| self.slots[s].as_ref())
    }

    /// Number of entries whose features have been initialised.
    pub fn initialized_count(&self) -> usize {
        self.eligible
    }

    /// Inserts `batch`, first evicting as many entries as needed to stay
    /// within capacity. MinRed evictions happen one at a time, each on the
    /// nearest-neighbour distances left by the previous one. Returns evicted
    /// sample ids in eviction order.
    pub fn add(&mut self, batch: Vec<Sample>) -> Result<Vec<u64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        if batch.len() > self.capacity {
            return Err(Error::config(
                "batch",
                format!(
                    "batch of {} exceeds buffer capacity {}",
                    batch.len(),
                    self.capacity
                ),
            ));
        }
        for (i, s) in batch.iter().enumerate() {
            if self.by_id.contains_key(&s.id) || batch[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Domain(format!("sample {} is already buffered", s.id)));
            }
        }
        let excess = (self.len() + batch.len()).saturating_sub(self.capacity);
        let mut evicted = Vec::with_capacity(excess);
        for _ in 0..excess {
            let victim = match self.policy {
                EvictionPolicy::Fifo => self.oldest_slot(),
                EvictionPolicy::MinRed => self.minred_victim(),
            }
            .expect("buffer non-empty while over capacity");
            evicted.push(self.remove_slot(victim).sample.id);
        }
        for sample in batch {
            self.insert(sample);
        }
        Ok(evicted)
    }

    /// Removes the MinRed victim: among initialised entries, the one whose
    /// nearest neighbour is closest, ties going to the oldest. With a single
    /// initialised entry that entry goes; with none, the oldest entry goes.
    pub fn evict_minred(&mut self) -> Option<u64> {
        let slot = self.minred_victim()?;
        Some(self.remove_slot(slot).sample.id)
    }

    /// Updates the tracked features of `ids` with `embeddings`. Ids no longer
    /// in the buffer are skipped and counted; returns the number skipped.
    pub fn track_features(&mut self, ids: &[u64], embeddings: &[Vec<f64>]) -> Result<usize> {
        if ids.len() != embeddings.len() {
            return Err(Error::Domain(format!(
                "{} ids but {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        for z in embeddings {
            if z.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("non-finite embedding".into()));
            }
            match self.dim {
                Some(d) if d != z.len() => {
                    return Err(Error::Domain(format!(
                        "embedding dimension {} differs from tracked dimension {d}",
                        z.len()
                    )))
                }
                Some(_) => {}
                None => {
                    if z.is_empty() {
                        return Err(Error::Domain("empty embedding".into()));
                    }
                    self.dim = Some(z.len());
                    self.units = vec![0.0; self.slots.len() * z.len()];
                }
            }
        }
        let mut skipped = 0;
        let mut changed = Vec::with_capacity(ids.len());
        for (&id, z) in ids.iter().zip(embeddings) {
            let Some(&slot) = self.by_id.get(&id) else {
                skipped += 1;
                continue;
            };
            let entry = self.slots[slot].as_mut().expect("live slot");
            entry.feature.update(z);
            let value = entry.feature.value.clone();
            self.install_feature(slot, &value);
            if !changed.contains(&slot) {
                changed.push(slot);
            }
        }
        if self.tracks_neighbours() {
            self.repair_neighbours(&changed);
        }
        self.stats.skipped_updates += skipped as u64;
        Ok(skipped)
    }

    /// Uniform sample of `b` distinct entries in random order.
    pub fn sample_batch(&self, b: usize, rng_seed: u64) -> Result<Vec<Sample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.sample_batch_with(b, &mut rng)
    }

    pub fn sample_batch_with<R: rand::Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<Vec<Sample>> {
        if b > self.len() {
            return Err(Error::InsufficientData {
                requested: b,
                available: self.len(),
            });
        }
        let mut slots: Vec<usize> = self.order.values().copied().collect();
        let (chosen, _) = slots.partial_shuffle(rng, b);
        Ok(chosen
            .iter()
            .map(|&s| self.slots[s].as_ref().expect("live slot").sample.clone())
            .collect())
    }

    /// Histogram of buffered samples under `grouping`.
    pub fn composition(&self, grouping: Grouping<'_>) -> BTreeMap<u64, usize> {
        let mut hist = BTreeMap::new();
        for e in self.entries() {
            let key = match grouping {
                Grouping::BySource => Some(e.sample.source),
                Grouping::ByClass => Some(e.sample.class_label as u64),
                Grouping::ByPartition(sched) => {
                    sched.partition_of(e.sample.class_label).map(|p| p as u64)
                }
            };
            if let Some(k) = key {
                *hist.entry(k).or_insert(0) += 1;
            }
        }
        hist
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        BufferSnapshot {
            capacity: self.capacity,
            policy: self.policy,
            alpha: self.alpha,
            entries: self
                .entries()
                .map(|e| SnapshotEntry {
                    id: e.sample.id,
                    source: e.sample.source,
                    class_label: e.sample.class_label,
                    insert_order: e.insert_order,
                    feature: e.feature.initialized.then(|| e.feature.value.clone()),
                })
                .collect(),
        }
    }

    fn insert(&mut self, sample: Sample) {
        let order = self.next_order;
        self.next_order += 1;
        let id = sample.id;
        let entry = BufferEntry {
            sample,
            feature: TrackedFeature::new(self.alpha),
            insert_order: order,
        };
        let slot = match self.free.pop() {
            Some(s) => {
                self.slots[s] = Some(entry);
                s
            }
            None => {
                self.slots.push(Some(entry));
                self.state.push(FeatureState::Uninit);
                self.nn_dist.push(f64::INFINITY);
                self.nn_slot.push(usize::MAX);
                self.dirty.push(false);
                self.orders.push(order);
                if let Some(d) = self.dim {
                    self.units.resize(self.slots.len() * d, 0.0);
                }
                self.slots.len() - 1
            }
        };
        self.state[slot] = FeatureState::Uninit;
        self.nn_dist[slot] = f64::INFINITY;
        self.nn_slot[slot] = usize::MAX;
        self.dirty[slot] = false;
        self.orders[slot] = order;
        self.order.insert(order, slot);
        self.by_id.insert(id, slot);
        self.stats.inserts += 1;
    }

    fn remove_slot(&mut self, slot: usize) -> BufferEntry {
        let entry = self.slots[slot].take().expect("live slot");
        self.order.remove(&entry.insert_order);
        self.by_id.remove(&entry.sample.id);
        self.free.push(slot);
        self.stats.evictions += 1;
        if self.state[slot] != FeatureState::Uninit {
            self.state[slot] = FeatureState::Uninit;
            self.eligible -= 1;
            // Entries that pointed here keep their distance as a lower bound.
            for k in 0..self.slots.len() {
                if self.nn_slot[k] == slot {
                    self.nn_slot[k] = usize::MAX;
                    self.dirty[k] = true;
                }
            }
        }
        entry
    }

    fn oldest_slot(&self) -> Option<usize> {
        self.order.values().next().copied()
    }

    fn eligible_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.slots.len()).filter(move |&k| self.state[k] != FeatureState::Uninit)
    }

    fn minred_victim(&mut self) -> Option<usize> {
        if self.is_empty() {
            return None;
        }
        if self.eligible < 2 {
            self.stats.fifo_fallbacks += 1;
            // Uninitialised entries stay protected while an initialised one exists.
            return self
                .order
                .values()
                .copied()
                .find(|&s| self.state[s] != FeatureState::Uninit)
                .or_else(|| self.oldest_slot());
        }
        if !self.tracks_neighbours() {
            self.rebuild_neighbours();
        }
        loop {
            let mut best: Option<(f64, u64, usize)> = None;
            for k in self.eligible_slots() {
                let d = self.nn_dist[k];
                let ord = self.orders[k];
                let better = match best {
                    None => true,
                    Some((bd, bo, _)) => d < bd || (d == bd && ord < bo),
                };
                if better {
                    best = Some((d, ord, k));
                }
            }
            let (_, _, k) = best?;
            if !self.dirty[k] {
                return Some(k);
            }
            // A lower bound won; make it exact and look again.
            let (d, j) = self.row_minima(&[k])[0];
            self.set_nn(k, d, j);
        }
    }

    /// The nearest-neighbour cache only matters for MinRed eviction.
    fn tracks_neighbours(&self) -> bool {
        self.policy == EvictionPolicy::MinRed
    }

    fn rebuild_neighbours(&mut self) {
        let all: Vec<usize> = self.eligible_slots().collect();
        for (k, (d, j)) in all.iter().zip(self.row_minima(&all)) {
            self.set_nn(*k, d, j);
        }
    }

    fn set_nn(&mut self, k: usize, dist: f64, j: usize) {
        self.nn_dist[k] = dist;
        self.nn_slot[k] = j;
        self.dirty[k] = false;
    }

    fn install_feature(&mut self, slot: usize, value: &[f64]) {
        let d = self.dim.expect("dimension fixed before refresh");
        if self.state[slot] == FeatureState::Uninit {
            self.eligible += 1;
        }
        match unit(value) {
            Some(u) => {
                self.units[slot * d..(slot + 1) * d].copy_from_slice(&u);
                self.state[slot] = FeatureState::Unit;
            }
            None => {
                self.stats.zero_features += 1;
                log::warn!("zero-norm tracked feature; treating it as orthogonal to all others");
                self.state[slot] = FeatureState::Zero;
            }
        }
    }

    /// Calls `f(row, j, distance)` for every eligible `j` and every `rows[row]`
    /// other than `j`, streaming the feature table once.
    fn scan_distances(&self, rows: &[usize], mut f: impl FnMut(usize, usize, f64)) {
        let d = self.dim.unwrap_or(0);
        if d == 0 {
            return;
        }
        let own: Vec<Option<&[f64]>> = rows
            .iter()
            .map(|&r| (self.state[r] == FeatureState::Unit).then(|| &self.units[r * d..(r + 1) * d]))
            .collect();
        for (j, (u, &state)) in self.units.chunks_exact(d).zip(&self.state).enumerate() {
            if state == FeatureState::Uninit {
                continue;
            }
            for (row, (&r, o)) in rows.iter().zip(&own).enumerate() {
                if r == j {
                    continue;
                }
                let dist = match (state, o) {
                    (FeatureState::Unit, Some(o)) => 1.0 - dot(o, u),
                    _ => 1.0,
                };
                f(row, j, dist);
            }
        }
    }

    /// Exact nearest-neighbour distance and slot for each of `rows`.
    fn row_minima(&self, rows: &[usize]) -> Vec<(f64, usize)> {
        let mut best = vec![(f64::INFINITY, usize::MAX); rows.len()];
        self.scan_distances(rows, |row, j, dist| {
            if dist < best[row].0 {
                best[row] = (dist, j);
            }
        });
        best
    }

    /// Restores the cache after the features of `changed` moved: their own
    /// rows are recomputed, and every other entry either adopts a changed
    /// slot as its new nearest neighbour or, if its old neighbour moved away,
    /// keeps the old distance as a lower bound.
    fn repair_neighbours(&mut self, changed: &[usize]) {
        if changed.is_empty() {
            return;
        }
        let n = self.slots.len();
        let mut in_changed = vec![false; n];
        for &c in changed {
            in_changed[c] = true;
        }
        let mut rows = vec![(f64::INFINITY, usize::MAX); changed.len()];
        let mut cols = vec![(f64::INFINITY, usize::MAX); n];
        self.scan_distances(changed, |row, j, dist| {
            if dist < rows[row].0 {
                rows[row] = (dist, j);
            }
            if dist < cols[j].0 {
                cols[j] = (dist, changed[row]);
            }
        });
        for j in 0..n {
            if in_changed[j] || self.state[j] == FeatureState::Uninit {
                continue;
            }
            let (dist, via) = cols[j];
            let lost = self.nn_slot[j] != usize::MAX && in_changed[self.nn_slot[j]];
            if lost || self.dirty[j] {
                // every unchanged slot is at least nn_dist[j] away
                if dist <= self.nn_dist[j] {
                    self.set_nn(j, dist, via);
                } else {
                    self.nn_slot[j] = usize::MAX;
                    self.dirty[j] = true;
                }
            } else if dist < self.nn_dist[j] {
                self.set_nn(j, dist, via);
            }
        }
        for (&c, (dist, j)) in changed.iter().zip(rows) {
            self.set_nn(c, dist, j);
        }
    }
}

/// Serializable view of a buffer, for composition analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSnapshot {
    pub capacity: usize,
    pub policy: EvictionPolicy,
    pub alpha: f64,
    pub entries: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub id: u64,
    pub source: u64,
    pub class_label: usize,
    pub insert_order: u64,
    /// `None` until the entry's features are first tracked.
    pub feature: Option<Vec<f64>>,
}

impl BufferSnapshot {
    pub fn write_json<W: std::io::Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}

/// A replay buffer shared between an ingest context and a training context.
/// Each call takes the lock for its whole duration, so public operations are
/// atomic with respect to one another.
#[derive(Clone, Debug)]
pub struct SharedReplayBuffer {
    inner: Arc<Mutex<ReplayBuffer>>,
}

impl SharedReplayBuffer {
    pub fn new(buffer: ReplayBuffer) -> Self {
        SharedReplayBuffer {
            inner: Arc::new(Mutex::new(buffer)),
        }
    }

    fn lock(&self) -> MutexGuard<'_, ReplayBuffer> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn add(&self, batch: Vec<Sample>) -> Result<Vec<u64>> {
        self.lock().add(batch)
    }

    pub fn track_features(&self, ids: &[u64], embeddings: &[Vec<f64>]) -> Result<usize> {
        self.lock().track_features(ids, embeddings)
    }

    pub fn sample_batch(&self, b: usize, rng_seed: u64) -> Result<Vec<Sample>> {
        self.lock().sample_batch(b, rng_seed)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    pub fn composition(&self, grouping: Grouping<'_>) -> BTreeMap<u64, usize> {
        self.lock().composition(grouping)
    }

    pub fn snapshot(&self) -> BufferSnapshot {
        self.lock().snapshot()
    }

    pub fn stats(&self) -> BufferStats {
        self.lock().stats()
    }

    /// Runs `f` with exclusive access. `f` must not call back into this handle.
    pub fn with<T>(&self, f: impl FnOnce(&mut ReplayBuffer) -> T) -> T {
        f(&mut self.lock())
    }
}
