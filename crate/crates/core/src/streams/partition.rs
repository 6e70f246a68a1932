//! Class partitions for non-stationary streams and the smooth transition
//! schedule between consecutive partitions.

use serde::{Deserialize, Serialize};

use super::model::ClassModel;
use crate::error::{Error, Result};

/// Splits the hierarchy's DFS leaf order into `num_partitions` contiguous
/// groups. When the split is uneven the leading groups get one extra class.
pub fn partition_classes(model: &ClassModel, num_partitions: usize) -> Result<Vec<Vec<usize>>> {
    let leaves = model.hierarchy().dfs_leaves();
    split_contiguous(&leaves, num_partitions)
}

pub(crate) fn split_contiguous(order: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = order.len();
    if k == 0 {
        return Err(Error::config("num_partitions", "must be positive"));
    }
    if k > n {
        return Err(Error::config(
            "num_partitions",
            format!("{k} partitions requested for only {n} classes"),
        ));
    }
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for g in 0..k {
        let size = base + usize::from(g < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSchedule {
    /// Class sets D_1..D_n in DFS order.
    pub partitions: Vec<Vec<usize>>,
    pub samples_per_partition: usize,
    /// Fraction of each span mixed with its neighbour at a boundary.
    pub transition_fraction: f64,
    /// Presentation order: `permutation[k]` is the partition shown k-th.
    pub permutation: Vec<usize>,
}

impl PartitionSchedule {
    pub fn new(
        model: &ClassModel,
        num_partitions: usize,
        samples_per_partition: usize,
        transition_fraction: f64,
        permutation: Vec<usize>,
    ) -> Result<Self> {
        let sched = PartitionSchedule {
            partitions: partition_classes(model, num_partitions)?,
            samples_per_partition,
            transition_fraction,
            permutation,
        };
        sched.validate(model)?;
        Ok(sched)
    }

    pub fn validate(&self, model: &ClassModel) -> Result<()> {
        if self.partitions.is_empty() {
            return Err(Error::config("partitions", "no partitions"));
        }
        if self.samples_per_partition == 0 {
            return Err(Error::config("samples_per_partition", "must be positive"));
        }
        if !(0.0..=0.5).contains(&self.transition_fraction) {
            return Err(Error::config("transition_fraction", "must lie in [0, 0.5]"));
        }
        let n = model.num_classes();
        let mut seen = vec![false; n];
        for part in &self.partitions {
            if part.is_empty() {
                return Err(Error::config("partitions", "empty partition"));
            }
            for &c in part {
                if c >= n {
                    return Err(Error::config("partitions", format!("class {c} out of range")));
                }
                if std::mem::replace(&mut seen[c], true) {
                    return Err(Error::config(
                        "partitions",
                        format!("class {c} appears in more than one partition"),
                    ));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("partitions", "partitions do not cover every class"));
        }
        let leaves = model.hierarchy().dfs_leaves();
        let rank: Vec<usize> = {
            let mut r = vec![0; n];
            for (i, &c) in leaves.iter().enumerate() {
                r[c] = i;
            }
            r
        };
        for part in &self.partitions {
            let mut ranks: Vec<usize> = part.iter().map(|&c| rank[c]).collect();
            ranks.sort_unstable();
            if ranks.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::config(
                    "partitions",
                    "each partition must be a contiguous run of the DFS leaf order",
                ));
            }
        }
        let mut perm = self.permutation.clone();
        perm.sort_unstable();
        if perm != (0..self.partitions.len()).collect::<Vec<_>>() {
            return Err(Error::config(
                "permutation",
                "must be a permutation of the partition indices",
            ));
        }
        Ok(())
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn total_len(&self) -> usize {
        self.samples_per_partition * self.partitions.len()
    }

    /// Half-width of each transition window, in samples.
    pub fn half_window(&self) -> usize {
        (self.transition_fraction * self.samples_per_partition as f64).round() as usize
    }

    /// Partition index (into `partitions`) that owns `class`.
    pub fn partition_of(&self, class: usize) -> Option<usize> {
        self.partitions.iter().position(|p| p.contains(&class))
    }

    /// Stage (position in the presentation order) at which partition `p` is shown.
    pub fn stage_of(&self, partition: usize) -> usize {
        self.permutation
            .iter()
            .position(|&q| q == partition)
            .expect("validated permutation")
    }

    /// Stream position range `[start, end)` nominally assigned to stage `k`.
    pub fn stage_span(&self, stage: usize) -> (usize, usize) {
        let s = self.samples_per_partition;
        (stage * s, (stage + 1) * s)
    }

    /// Sampling probability of every partition (indexed like `partitions`)
    /// at stream position `pos`.
    ///
    /// Around each stage boundary `t` the window `[t - w, t + w]` mixes the
    /// outgoing and incoming partitions linearly; both endpoints are pure and
    /// the boundary itself is an even split.
    pub fn probabilities(&self, pos: usize) -> Vec<f64> {
        let n = self.partitions.len();
        let s = self.samples_per_partition;
        let w = self.half_window();
        let mut probs = vec![0.0; n];
        let stage = (pos / s).min(n - 1);

        let mut mixed = false;
        if w > 0 {
            // Boundary between stage k-1 and k sits at k*s.
            let nearest = ((pos + s / 2) / s).clamp(1, n.max(2) - 1);
            if n > 1 && nearest < n {
                let t = nearest * s;
                if pos + w >= t && pos <= t + w {
                    let lambda = (pos as f64 - (t as f64 - w as f64)) / (2.0 * w as f64);
                    probs[self.permutation[nearest - 1]] = 1.0 - lambda;
                    probs[self.permutation[nearest]] += lambda;
                    mixed = true;
                }
            }
        }
        if !mixed {
            probs[self.permutation[stage]] = 1.0;
        }
        probs
    }
}
