//! Synthetic class geometry: Gaussian class clusters whose means follow a
//! balanced binary hierarchy, so classes that are adjacent in DFS order are
//! also close in payload space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise class-mean separation must exceed this multiple of the
/// within-class scale.
pub const MIN_SEPARATION_RATIO: f64 = 4.0;

/// Balanced binary tree over class indices `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    nodes: Vec<TreeNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Half-open range of leaf (class) indices under this node.
    pub leaves: (usize, usize),
    pub depth: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

impl Hierarchy {
    pub fn balanced(num_classes: usize) -> Self {
        let mut nodes = vec![TreeNode {
            leaves: (0, num_classes),
            depth: 0,
            parent: None,
            children: Vec::new(),
        }];
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let (lo, hi) = nodes[idx].leaves;
            if hi - lo < 2 {
                continue;
            }
            let mid = lo + (hi - lo).div_ceil(2);
            let depth = nodes[idx].depth + 1;
            for range in [(lo, mid), (mid, hi)] {
                let child = nodes.len();
                nodes.push(TreeNode {
                    leaves: range,
                    depth,
                    parent: Some(idx),
                    children: Vec::new(),
                });
                nodes[idx].children.push(child);
                stack.push(child);
            }
        }
        Hierarchy { nodes }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes[0].leaves.1
    }

    /// Leaf class indices in depth-first (left-to-right) order.
    pub fn dfs_leaves(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_leaves());
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.children.is_empty() {
                out.push(node.leaves.0);
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    /// Node indices from the root's child down to the leaf holding `class`.
    fn path_to(&self, class: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.children.is_empty() {
                return path;
            }
            idx = *node
                .children
                .iter()
                .find(|&&c| {
                    let (lo, hi) = self.nodes[c].leaves;
                    (lo..hi).contains(&class)
                })
                .expect("class inside root range");
            path.push(idx);
        }
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassModelConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub within_class_scale: f64,
    /// Minimum pairwise distance between class means, in units of
    /// `within_class_scale`. Must exceed [`MIN_SEPARATION_RATIO`].
    pub separation: f64,
    /// Ratio between the weight of a tree level and its parent level.
    pub level_decay: f64,
    pub seed: u64,
}

impl Default for ClassModelConfig {
    fn default() -> Self {
        ClassModelConfig {
            num_classes: 16,
            dim: 32,
            within_class_scale: 1.0,
            separation: 6.0,
            level_decay: 0.7,
            seed: 0,
        }
    }
}

impl ClassModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "payload dimension must be positive"));
        }
        if !(self.within_class_scale.is_finite() && self.within_class_scale > 0.0) {
            return Err(Error::config("within_class_scale", "must be positive and finite"));
        }
        if !(self.separation.is_finite() && self.separation > MIN_SEPARATION_RATIO) {
            return Err(Error::config(
                "separation",
                format!("must exceed {MIN_SEPARATION_RATIO} (got {})", self.separation),
            ));
        }
        if !(self.level_decay > 0.0 && self.level_decay <= 1.0) {
            return Err(Error::config("level_decay", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Class-conditional Gaussian payload model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    num_classes: usize,
    dim: usize,
    within_class_scale: f64,
    class_means: Vec<Vec<f64>>,
    hierarchy: Hierarchy,
}

impl ClassModel {
    /// Builds class means as weighted sums of one direction per tree node on
    /// the root-to-leaf path. Directions are orthonormal when the payload
    /// dimension allows it, random unit vectors otherwise. The means are then
    /// centered and rescaled so the closest pair sits exactly at
    /// `separation * within_class_scale`.
    pub fn new(cfg: &ClassModelConfig) -> Result<Self> {
        cfg.validate()?;
        let hierarchy = Hierarchy::balanced(cfg.num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_dirs = hierarchy.nodes().len();
        let directions = random_directions(n_dirs, cfg.dim, n_dirs - 1 <= cfg.dim, &mut rng);

        let mut means: Vec<Vec<f64>> = (0..cfg.num_classes)
            .map(|c| {
                let mut m = vec![0.0; cfg.dim];
                for node in hierarchy.path_to(c) {
                    let depth = hierarchy.nodes()[node].depth;
                    let w = cfg.level_decay.powi(depth as i32 - 1);
                    for (mi, di) in m.iter_mut().zip(&directions[node]) {
                        *mi += w * di;
                    }
                }
                m
            })
            .collect();

        let centroid: Vec<f64> = (0..cfg.dim)
            .map(|k| means.iter().map(|m| m[k]).sum::<f64>() / cfg.num_classes as f64)
            .collect();
        for m in &mut means {
            for (mi, ci) in m.iter_mut().zip(&centroid) {
                *mi -= ci;
            }
        }

        let min_dist = min_pairwise_distance(&means);
        if !(min_dist > 1e-9) {
            return Err(Error::config(
                "dim",
                "payload dimension too small to separate the class means",
            ));
        }
        let target = cfg.separation * cfg.within_class_scale;
        for m in &mut means {
            for mi in m.iter_mut() {
                *mi *= target / min_dist;
            }
        }

        Ok(ClassModel {
            num_classes: cfg.num_classes,
            dim: cfg.dim,
            within_class_scale: cfg.within_class_scale,
            class_means: means,
            hierarchy,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn within_class_scale(&self) -> f64 {
        self.within_class_scale
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.class_means[class]
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    /// Draws one payload: class mean plus isotropic Gaussian noise.
    pub fn draw<R: rand::Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.class_means[class]
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(rng);
                m + self.within_class_scale * e
            })
            .collect()
    }

    /// Draws `per_class` labelled payloads for every class, class-major.
    pub fn labelled_set(&self, per_class: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(per_class * self.num_classes);
        let mut ys = Vec::with_capacity(per_class * self.num_classes);
        for c in 0..self.num_classes {
            for _ in 0..per_class {
                xs.push(self.draw(c, &mut rng));
                ys.push(c);
            }
        }
        (xs, ys)
    }
}

pub(crate) fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

fn random_directions(n: usize, dim: usize, orthogonal: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n);
    // Node 0 is the root and never contributes, but keeps indices aligned.
    dirs.push(vec![0.0; dim]);
    while dirs.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if orthogonal {
            for u in dirs.iter().skip(1) {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        dirs.push(v);
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dfs_leaves_are_class_indices_in_order() {
        for n in 2..40 {
            let h = Hierarchy::balanced(n);
            assert_eq!(h.dfs_leaves(), (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sixteen_classes_form_a_depth_four_tree() {
        let h = Hierarchy::balanced(16);
        assert_eq!(h.max_depth(), 4);
        assert_eq!(h.nodes().len(), 31);
    }

    #[test]
    fn separation_invariant_holds() {
        for (n, d) in [(2, 2), (10, 32), (16, 32), (16, 8), (64, 16)] {
            let cfg = ClassModelConfig {
                num_classes: n,
                dim: d,
                ..Default::default()
            };
            let m = ClassModel::new(&cfg).unwrap();
            let sep = min_pairwise_distance(m.class_means());
            assert!(sep > MIN_SEPARATION_RATIO * m.within_class_scale());
            assert!((sep - cfg.separation).abs() < 1e-9);
        }
    }

    #[test]
    fn siblings_are_closer_than_cousins() {
        let m = ClassModel::new(&ClassModelConfig::default()).unwrap();
        let dist = |a: usize, b: usize| -> f64 {
            m.mean(a)
                .iter()
                .zip(m.mean(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        assert!(dist(0, 1) < dist(0, 2));
        assert!(dist(0, 3) < dist(0, 4));
        assert!(dist(0, 7) < dist(0, 8));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ClassModelConfig { num_classes: 1, ..Default::default() },
            ClassModelConfig { dim: 0, ..Default::default() },
            ClassModelConfig { separation: 4.0, ..Default::default() },
            ClassModelConfig { within_class_scale: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(ClassModel::new(&cfg), Err(Error::Config { .. })));
        }
    }
}
