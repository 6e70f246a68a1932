//! Linear probe: multinomial logistic regression on frozen embeddings,
//! trained with full-batch accelerated gradient descent on whitened inputs.

use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::nn::dot;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            tolerance: 1e-4,
            max_iterations: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub overall: f64,
    /// Held-out accuracy per class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// Classes missing from the training set. They are never predicted.
    pub absent_classes: Vec<usize>,
    pub iterations: usize,
    pub final_grad_norm: f64,
    predictions: Vec<usize>,
    labels: Vec<usize>,
}

impl ProbeResult {
    /// Accuracy over held-out samples whose class belongs to each group.
    /// Groups with no held-out samples report `None`.
    pub fn group_accuracy(&self, groups: &[Vec<usize>]) -> Vec<Option<f64>> {
        groups
            .iter()
            .map(|g| {
                let (mut hit, mut n) = (0usize, 0usize);
                for (&p, &y) in self.predictions.iter().zip(&self.labels) {
                    if g.contains(&y) {
                        n += 1;
                        hit += usize::from(p == y);
                    }
                }
                (n > 0).then(|| hit as f64 / n as f64)
            })
            .collect()
    }

    pub fn predictions(&self) -> &[usize] {
        &self.predictions
    }
}

/// Affine map onto the principal axes of the training features, scaled to
/// unit variance. Axes with negligible variance are dropped.
struct Whitener {
    mean: Vec<f64>,
    /// One row per retained axis, already divided by its standard deviation.
    axes: Vec<Vec<f64>>,
}

impl Whitener {
    fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for x in xs {
            let c = DVector::from_iterator(d, x.iter().zip(&mean).map(|(v, m)| v - m));
            cov.syger(1.0 / n, &c, &c, 1.0);
        }
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let mut axes = Vec::new();
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > top * 1e-10 && lambda > 0.0 {
                let s = lambda.sqrt();
                axes.push(eig.eigenvectors.column(k).iter().map(|v| v / s).collect());
            }
        }
        Whitener { mean, axes }
    }

    /// Whitened features with a trailing 1 for the bias.
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let mut out: Vec<f64> = self.axes.iter().map(|a| dot(a, &centred)).collect();
        out.push(1.0);
        out
    }
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_spectral_norm(xs: &[Vec<f64>]) -> f64 {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let mut w = vec![0.0; d];
        for x in xs {
            let s = dot(x, &v) / n;
            for (wi, xi) in w.iter_mut().zip(x) {
                *wi += s * xi;
            }
        }
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

fn logits(weights: &[f64], x: &[f64], classes: usize, mask: &[bool], out: &mut [f64]) {
    let d = x.len();
    for c in 0..classes {
        out[c] = if mask[c] {
            dot(&weights[c * d..(c + 1) * d], x)
        } else {
            f64::NEG_INFINITY
        };
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Trains a softmax classifier on `train_x` and scores it on `test_x`.
///
/// Features are whitened with training statistics, which leaves the set of
/// linear classifiers unchanged but makes the problem well conditioned. The
/// step size is the inverse of the loss's smoothness bound, so the iteration
/// is deterministic and needs no tuning.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::Domain("feature and label counts differ".into()));
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::InsufficientData {
            requested: 1,
            available: 0,
        });
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= num_classes) {
        return Err(Error::Domain(format!("label {y} out of range")));
    }
    let mut present = vec![false; num_classes];
    for &y in train_y {
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Domain("probe needs at least two training classes".into()));
    }
    let absent_classes: Vec<usize> = (0..num_classes).filter(|&c| !present[c]).collect();
    if !absent_classes.is_empty() {
        log::warn!("classes {absent_classes:?} absent from probe training set");
    }

    let scaler = Whitener::fit(train_x);
    let xs: Vec<Vec<f64>> = train_x.iter().map(|x| scaler.apply(x)).collect();
    let d = xs[0].len();
    let n = xs.len() as f64;
    // Softmax cross-entropy is (λmax(XᵀX/n) / 2)-smooth in the weights.
    let smooth = 0.5 * gram_spectral_norm(&xs);
    let step = if smooth > 0.0 { 1.0 / smooth } else { 1.0 };

    let k = num_classes;
    let mut w = vec![0.0; k * d];
    let mut w_prev = w.clone();
    let mut look = w.clone();
    let mut grad = vec![0.0; k * d];
    let mut z = vec![0.0; k];
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for it in 0..cfg.max_iterations {
        // Nesterov look-ahead point
        let momentum = it as f64 / (it as f64 + 3.0);
        for i in 0..w.len() {
            look[i] = w[i] + momentum * (w[i] - w_prev[i]);
        }
        grad.fill(0.0);
        for (x, &y) in xs.iter().zip(train_y) {
            logits(&look, x, k, &present, &mut z);
            softmax_in_place(&mut z);
            z[y] -= 1.0;
            for c in 0..k {
                if present[c] {
                    let g = z[c] / n;
                    for (gi, xi) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *gi += g * xi;
                    }
                }
            }
        }
        grad_norm = dot(&grad, &grad).sqrt();
        iterations = it + 1;
        if grad_norm < cfg.tolerance {
            w.copy_from_slice(&look);
            break;
        }
        w_prev.copy_from_slice(&w);
        for i in 0..w.len() {
            w[i] = look[i] - step * grad[i];
        }
    }

    let mut predictions = Vec::with_capacity(test_x.len());
    for x in test_x {
        let xs = scaler.apply(x);
        logits(&w, &xs, k, &present, &mut z);
        predictions.push(argmax(&z));
    }
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(test_y) {
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let overall = hits.iter().sum::<usize>() as f64 / test_y.len() as f64;
    let per_class = (0..k)
        .map(|c| (counts[c] > 0).then(|| hits[c] as f64 / counts[c] as f64))
        .collect();
    Ok(ProbeResult {
        overall,
        per_class,
        absent_classes,
        iterations,
        final_grad_norm: grad_norm,
        predictions,
        labels: test_y.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn clusters(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..2 {
            let centre = if c == 0 { [-3.0, 1.0] } else { [3.0, -1.0] };
            for _ in 0..n {
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                xs.push(vec![centre[0] + e1, centre[1] + e2]);
                ys.push(c);
            }
        }
        (xs, ys)
    }

    /// Fisher LDA with pooled covariance, solved in closed form.
    fn lda_accuracy(train: &(Vec<Vec<f64>>, Vec<usize>), test: &(Vec<Vec<f64>>, Vec<usize>)) -> f64 {
        let mut mu = [[0.0; 2]; 2];
        let mut cnt = [0.0; 2];
        for (x, &y) in train.0.iter().zip(&train.1) {
            mu[y][0] += x[0];
            mu[y][1] += x[1];
            cnt[y] += 1.0;
        }
        for c in 0..2 {
            mu[c][0] /= cnt[c];
            mu[c][1] /= cnt[c];
        }
        let mut s = [[0.0; 2]; 2];
        for (x, &y) in train.0.iter().zip(&train.1) {
            let d = [x[0] - mu[y][0], x[1] - mu[y][1]];
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += d[i] * d[j];
                }
            }
        }
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        let dm = [mu[1][0] - mu[0][0], mu[1][1] - mu[0][1]];
        let w = [inv[0][0] * dm[0] + inv[0][1] * dm[1], inv[1][0] * dm[0] + inv[1][1] * dm[1]];
        let mid = [(mu[0][0] + mu[1][0]) / 2.0, (mu[0][1] + mu[1][1]) / 2.0];
        let hits = test
            .0
            .iter()
            .zip(&test.1)
            .filter(|(x, &y)| {
                let score = w[0] * (x[0] - mid[0]) + w[1] * (x[1] - mid[1]);
                usize::from(score > 0.0) == y
            })
            .count();
        hits as f64 / test.1.len() as f64
    }

    #[test]
    fn separable_clusters_match_lda() {
        let train = clusters(500, 1);
        let test = clusters(500, 2);
        let r = linear_probe(&train.0, &train.1, &test.0, &test.1, 2, &ProbeConfig::default()).unwrap();
        let lda = lda_accuracy(&train, &test);
        assert!(lda >= 0.99, "oracle {lda}");
        assert!(r.overall >= 0.99, "probe {}", r.overall);
        assert!((r.overall - lda).abs() <= 0.005);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = |rng: &mut ChaCha8Rng, n: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
            let xs = (0..n)
                .map(|_| (0..8).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            let ys = (0..n).map(|_| rng.random_range(0..10)).collect();
            (xs, ys)
        };
        let train = gen(&mut rng, 2000);
        let test = gen(&mut rng, 2000);
        let r = linear_probe(&train.0, &train.1, &test.0, &test.1, 10, &ProbeConfig::default()).unwrap();
        let sd = (0.1f64 * 0.9 / 2000.0).sqrt();
        assert!((r.overall - 0.1).abs() < 3.0 * sd, "{}", r.overall);
    }

    #[test]
    fn identical_sets_give_identical_accuracy() {
        let train = clusters(200, 9);
        let a = linear_probe(&train.0, &train.1, &train.0, &train.1, 2, &ProbeConfig::default()).unwrap();
        let b = linear_probe(&train.0, &train.1, &train.0, &train.1, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(a.overall, b.overall);
        assert!(a.overall > 0.99);
    }

    #[test]
    fn absent_class_is_flagged_and_never_predicted() {
        let train = clusters(100, 3);
        let mut test = clusters(50, 4);
        test.0.push(vec![0.0, 0.0]);
        test.1.push(2);
        let r = linear_probe(&train.0, &train.1, &test.0, &test.1, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(r.absent_classes, vec![2]);
        assert_eq!(r.per_class[2], Some(0.0));
        assert!(r.predictions().iter().all(|&p| p != 2));
    }

    #[test]
    fn one_training_class_is_an_error() {
        let xs = vec![vec![0.0], vec![1.0]];
        assert!(linear_probe(&xs, &[0, 0], &xs, &[0, 1], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn group_accuracy_splits_by_label() {
        let train = clusters(100, 5);
        let test = clusters(100, 6);
        let r = linear_probe(&train.0, &train.1, &test.0, &test.1, 2, &ProbeConfig::default()).unwrap();
        let g = r.group_accuracy(&[vec![0], vec![1], vec![0, 1]]);
        assert_eq!(g[2], Some(r.overall));
        assert_eq!(g[0], r.per_class[0]);
    }
}
