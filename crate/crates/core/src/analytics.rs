//! Correlation-likelihood mathematics and evaluation metrics.
//!
//! For a Markov stream whose consecutive samples are correlated with
//! probability `p_c`, samples `i < j` are correlated with probability
//! `p_c^(j-i)`. The correlation likelihood of a length-`b` window is the mean
//! of that over all `b(b-1)/2` pairs:
//!
//! ```text
//! P_c(b, p) = 2 / (b(b-1)) * sum_{i<j} p^(j-i)
//!           = 2 / (b(b-1)) * p/(1-p) * (b - (1-p^b)/(1-p))
//! ```

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand::rngs::SmallRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streams::{PartitionSchedule, Sample, SourceId};

fn check_domain(b: usize, p_c: f64) -> Result<()> {
    if b < 2 {
        return Err(Error::Domain(format!("window size must be at least 2 (got {b})")));
    }
    if !(0.0..=1.0).contains(&p_c) {
        return Err(Error::Domain(format!("p_c must lie in [0, 1] (got {p_c})")));
    }
    Ok(())
}

/// `P_c(b, p_c)` by the defining double sum over all pairs of the window.
pub fn correlation_likelihood_exact(b: usize, p_c: f64) -> Result<f64> {
    check_domain(b, p_c)?;
    let mut total = 0.0;
    for i in 1..b {
        let mut term = 1.0;
        for _j in (i + 1)..=b {
            term *= p_c;
            total += term;
        }
    }
    Ok(2.0 * total / (b as f64 * (b as f64 - 1.0)))
}

/// `P_c(b, p_c)` in closed form. `p_c = 1` returns the limit value 1.
pub fn correlation_likelihood_closed(b: usize, p_c: f64) -> Result<f64> {
    check_domain(b, p_c)?;
    if p_c == 0.0 {
        return Ok(0.0);
    }
    if p_c == 1.0 {
        return Ok(1.0);
    }
    let bf = b as f64;
    let q = 1.0 - p_c;
    // 1 - p^b without cancellation for p near 1
    let one_minus_pb = -(bf * p_c.ln()).exp_m1();
    let lag_sum = p_c / q * (bf - one_minus_pb / q);
    Ok(2.0 * lag_sum / (bf * (bf - 1.0)))
}

/// Monte Carlo estimate of `P_c(b, p_c)`: simulates `trials` independent
/// length-`b` Markov chains and averages the fraction of correlated pairs.
/// Returns `(estimate, standard_error)`.
pub fn correlation_likelihood_monte_carlo(
    b: usize,
    p_c: f64,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_domain(b, p_c)?;
    if trials == 0 {
        return Err(Error::Domain("trials must be at least 1".into()));
    }
    let mut rng = SmallRng::seed_from_u64(seed);
    let links = b - 1;
    let words = links.div_ceil(64);
    let tail_mask = if links % 64 == 0 {
        u64::MAX
    } else {
        (1u64 << (links % 64)) - 1
    };
    let threshold = BernoulliWord::new(p_c);
    let pairs = (b * (b - 1) / 2) as f64;

    let mut chain = vec![0u64; words];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        for w in chain.iter_mut() {
            *w = threshold.sample(&mut rng);
        }
        chain[words - 1] &= tail_mask;
        let correlated = count_linked_pairs(&chain);
        let frac = correlated as f64 / pairs;
        sum += frac;
        sum_sq += frac * frac;
    }
    let n = trials as f64;
    let mean = sum / n;
    let sigma = if trials > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, sigma))
}

/// 64 independent Bernoulli(p) draws per call, comparing 64 uniform
/// variates against `p` one binary digit at a time.
struct BernoulliWord {
    /// `p` scaled to 64 fractional bits; `None` encodes `p == 1`.
    bits: Option<u64>,
}

/// Digits compared unconditionally before checking for unresolved lanes.
const EAGER_DIGITS: u32 = 8;

impl BernoulliWord {
    fn new(p: f64) -> Self {
        BernoulliWord {
            bits: (p < 1.0).then(|| (p * 18_446_744_073_709_551_616.0) as u64),
        }
    }

    #[inline]
    fn sample<R: RngCore>(&self, rng: &mut R) -> u64 {
        let Some(q) = self.bits else {
            return u64::MAX;
        };
        if q == 0 {
            return 0;
        }
        let mut result = 0u64;
        let mut undecided = u64::MAX;
        let mut level = 64;
        // branch-free while nearly every word still has tied lanes
        let eager_end = (64 - EAGER_DIGITS).max(q.trailing_zeros());
        while level > eager_end {
            level -= 1;
            let digit = 0u64.wrapping_sub((q >> level) & 1);
            let w = rng.next_u64();
            result |= undecided & !w & digit;
            undecided &= !(w ^ digit);
        }
        while undecided != 0 && q & ((1u64 << level) - 1) != 0 {
            level -= 1;
            let digit = 0u64.wrapping_sub((q >> level) & 1);
            let w = rng.next_u64();
            result |= undecided & !w & digit;
            undecided &= !(w ^ digit);
        }
        // lanes still tied once the remaining digits of q are zero are >= q
        result
    }
}

/// Per-byte summary of link bits, least significant bit first: the run of
/// set bits at the start, the run at the end, and the sum over set bits of
/// the run length ending there when no run enters from below.
struct ByteRuns {
    lead: [u8; 256],
    tail: [u8; 256],
    local: [u8; 256],
}

const BYTE_RUNS: ByteRuns = {
    let mut t = ByteRuns {
        lead: [0; 256],
        tail: [0; 256],
        local: [0; 256],
    };
    let mut v = 0;
    while v < 256 {
        let byte = v as u8;
        t.lead[v] = byte.trailing_ones() as u8;
        t.tail[v] = byte.leading_ones() as u8;
        let mut run = 0;
        let mut sum = 0;
        let mut k = 0;
        while k < 8 {
            if (v >> k) & 1 == 1 {
                run += 1;
                sum += run;
            } else {
                run = 0;
            }
            k += 1;
        }
        t.local[v] = sum as u8;
        v += 1;
    }
    t
};

/// Number of correlated sample pairs given the link bits of a chain
/// (bit `i` set iff samples `i` and `i + 1` share a source). Samples `i < j`
/// are correlated iff links `i..j` are all set, so the count is the sum over
/// set links of the length of the run ending there.
fn count_linked_pairs(links: &[u64]) -> u64 {
    let t = &BYTE_RUNS;
    let mut total = 0u64;
    let mut run = 0u64;
    for &word in links {
        if word == 0 {
            run = 0;
            continue;
        }
        for byte in word.to_le_bytes() {
            let v = byte as usize;
            total += t.local[v] as u64 + t.lead[v] as u64 * run;
            run = t.tail[v] as u64 + run * u64::from(byte == u8::MAX);
        }
    }
    total
}

/// Fraction of unordered pairs sharing a source, or `None` below 2 items.
pub fn pair_correlation<I: IntoIterator<Item = SourceId>>(sources: I) -> Option<f64> {
    let mut counts: HashMap<SourceId, u64> = HashMap::new();
    let mut n = 0u64;
    for s in sources {
        *counts.entry(s).or_insert(0) += 1;
        n += 1;
    }
    if n < 2 {
        return None;
    }
    let same: u64 = counts.values().map(|&c| c * (c - 1) / 2).sum();
    Some(same as f64 / (n * (n - 1) / 2) as f64)
}

/// Within-batch correlation averaged over batches. Batches with fewer than
/// two samples are skipped; `None` if nothing remains.
pub fn measure_batch_correlation(batches: &[Vec<Sample>]) -> Option<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for batch in batches {
        match pair_correlation(batch.iter().map(|s| s.source)) {
            Some(c) => {
                total += c;
                used += 1;
            }
            None => log::warn!("skipping batch of size {} in correlation measurement", batch.len()),
        }
    }
    (used > 0).then(|| total / used as f64)
}

/// Fraction of consecutive pairs in `sources` that share a source.
pub fn consecutive_correlation(sources: &[SourceId]) -> Option<f64> {
    if sources.len() < 2 {
        return None;
    }
    let same = sources.windows(2).filter(|w| w[0] == w[1]).count();
    Some(same as f64 / (sources.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FifoReduction {
    /// `P_c(B, p_c) / P_c(b, p_c)`.
    pub exact_ratio: f64,
    /// `b / B`.
    pub approx_ratio: f64,
}

/// Compares the correlation likelihood of a FIFO buffer of size `big_b`
/// with that of a sequential batch of size `b`.
pub fn fifo_reduction_check(b: usize, big_b: usize, p_c: f64) -> Result<FifoReduction> {
    if big_b < b {
        return Err(Error::Domain(format!("buffer size {big_b} below batch size {b}")));
    }
    if !(p_c > 0.0 && p_c < 1.0) {
        return Err(Error::Domain(format!("p_c must lie in (0, 1) (got {p_c})")));
    }
    let seq = correlation_likelihood_closed(b, p_c)?;
    let fifo = correlation_likelihood_closed(big_b, p_c)?;
    if big_b > b && fifo >= seq {
        return Err(Error::Degenerate(format!(
            "P_c({big_b}) = {fifo} not below P_c({b}) = {seq}"
        )));
    }
    Ok(FifoReduction {
        exact_ratio: fifo / seq,
        approx_ratio: b as f64 / big_b as f64,
    })
}

/// Measured and analytic correlation likelihoods for one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub l_seq: f64,
    pub l_fifo: f64,
    pub l_minred_measured: f64,
    /// Consecutive-pair correlation inside the MinRed buffer divided by the
    /// same quantity on the raw stream.
    pub eta_effective: f64,
    pub sigma: f64,
}

impl CorrelationReport {
    pub fn new(
        b: usize,
        big_b: usize,
        p_c: f64,
        minred_contents: &[SourceId],
        raw_stream: &[SourceId],
        sigma: f64,
    ) -> Result<Self> {
        let l_seq = correlation_likelihood_closed(b, p_c)?;
        let l_fifo = correlation_likelihood_closed(big_b, p_c)?;
        let l_minred_measured = pair_correlation(minred_contents.iter().copied())
            .ok_or_else(|| Error::Domain("buffer holds fewer than two samples".into()))?;
        let raw = consecutive_correlation(raw_stream).unwrap_or(0.0);
        let buffered = consecutive_correlation(minred_contents).unwrap_or(0.0);
        let eta_effective = if raw > 0.0 { buffered / raw } else { 0.0 };
        Ok(CorrelationReport {
            l_seq,
            l_fifo,
            l_minred_measured,
            eta_effective,
            sigma,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    pub partition: usize,
    pub checkpoint: usize,
    pub acc_at_end_of_own_training: f64,
    pub acc_now: f64,
    /// `None` when the baseline accuracy is zero.
    pub relative_drop: Option<f64>,
}

/// Relative accuracy drop of every partition at each checkpoint after its
/// own training span ended.
///
/// `accuracy[c][p]` is the accuracy on partition `p` at checkpoint `c`;
/// `baseline[p]` is the checkpoint closing partition `p`'s span.
pub fn forgetting_curve(accuracy: &[Vec<f64>], baseline: &[usize]) -> Result<Vec<ForgettingRecord>> {
    let mut out = Vec::new();
    for (p, &base) in baseline.iter().enumerate() {
        let Some(row) = accuracy.get(base) else {
            return Err(Error::Domain(format!(
                "partition {p}: baseline checkpoint {base} missing"
            )));
        };
        let acc0 = *row
            .get(p)
            .ok_or_else(|| Error::Domain(format!("no accuracy for partition {p}")))?;
        for (c, acc_row) in accuracy.iter().enumerate().skip(base + 1) {
            let now = acc_row[p];
            out.push(ForgettingRecord {
                partition: p,
                checkpoint: c,
                acc_at_end_of_own_training: acc0,
                acc_now: now,
                relative_drop: (acc0 > 0.0).then(|| (now - acc0) / acc0),
            });
        }
    }
    Ok(out)
}

/// Mean relative drop over partitions whose span ended before `checkpoint`.
pub fn mean_relative_drop(records: &[ForgettingRecord], checkpoint: usize) -> Option<f64> {
    let drops: Vec<f64> = records
        .iter()
        .filter(|r| r.checkpoint == checkpoint)
        .filter_map(|r| r.relative_drop)
        .collect();
    (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64)
}

/// Mean accuracy on partitions not yet presented, per checkpoint.
///
/// `stage[c]` is the presentation stage active at checkpoint `c`. Entries
/// during the final stage are `None`.
pub fn openset_accuracy(
    accuracy: &[Vec<f64>],
    stage: &[usize],
    sched: &PartitionSchedule,
) -> Vec<Option<f64>> {
    accuracy
        .iter()
        .zip(stage)
        .map(|(row, &k)| {
            let unseen: Vec<f64> = sched
                .permutation
                .iter()
                .skip(k + 1)
                .map(|&p| row[p])
                .collect();
            (!unseen.is_empty()).then(|| unseen.iter().sum::<f64>() / unseen.len() as f64)
        })
        .collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: direct enumeration of pairs with `powi`.
    fn brute(b: usize, p: f64) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for i in 0..b {
            for j in i + 1..b {
                s += p.powi((j - i) as i32);
                n += 1;
            }
        }
        s / n as f64
    }

    #[test]
    fn exact_small_cases() {
        assert!((correlation_likelihood_exact(2, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((correlation_likelihood_exact(3, 0.5).unwrap() - 0.416_666_666_666_666_7).abs() < 1e-15);
        for b in [2, 5, 64] {
            assert_eq!(correlation_likelihood_exact(b, 0.0).unwrap(), 0.0);
            assert!((correlation_likelihood_exact(b, 1.0).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_small_cases() {
        assert!((correlation_likelihood_closed(2, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!((correlation_likelihood_closed(3, 0.5).unwrap() - 0.416_666_666_666_666_7).abs() < 1e-15);
        assert_eq!(correlation_likelihood_closed(7, 1.0).unwrap(), 1.0);
        assert_eq!(correlation_likelihood_closed(7, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn closed_matches_brute_force_at_large_window() {
        let v = correlation_likelihood_closed(1024, 0.99).unwrap();
        assert!((v - brute(1024, 0.99)).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_brute_force() {
        for b in [2, 3, 10, 100] {
            for p in [0.05, 0.5, 0.95] {
                let e = correlation_likelihood_exact(b, p).unwrap();
                assert!((e - brute(b, p)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(correlation_likelihood_exact(1, 0.5).is_err());
        assert!(correlation_likelihood_closed(0, 0.5).is_err());
        assert!(correlation_likelihood_exact(4, 1.5).is_err());
        assert!(correlation_likelihood_monte_carlo(4, 0.5, 0, 1).is_err());
    }

    #[test]
    fn monte_carlo_extremes_are_exact() {
        assert_eq!(correlation_likelihood_monte_carlo(16, 0.0, 1000, 1).unwrap(), (0.0, 0.0));
        let (est, sigma) = correlation_likelihood_monte_carlo(16, 1.0, 1000, 1).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn monte_carlo_within_three_sigma() {
        let exact = correlation_likelihood_exact(16, 0.7).unwrap();
        let (est, sigma) = correlation_likelihood_monte_carlo(16, 0.7, 100_000, 42).unwrap();
        assert!(sigma > 0.0);
        assert!((est - exact).abs() < 3.0 * sigma, "{est} vs {exact} ± {sigma}");
    }

    #[test]
    fn linked_pair_count_matches_run_lengths() {
        // links 1,1,0,1,1,1 -> runs of 3 and 4 samples -> 3 + 6 pairs
        let links = [0b111011u64];
        assert_eq!(count_linked_pairs(&links), 9);
        // a run crossing a word boundary: 70 consecutive links -> 71 samples
        let links = [u64::MAX, 0b111111];
        assert_eq!(count_linked_pairs(&links), 71 * 70 / 2);
        assert_eq!(count_linked_pairs(&[u64::MAX; 3]), 193 * 192 / 2);
        assert_eq!(count_linked_pairs(&[0, 1 << 63, 1]), 3);
    }

    #[test]
    fn linked_pair_count_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let words = [rng.next_u64() & rng.next_u64(), rng.next_u64() | rng.next_u64()];
            let bit = |i: usize| (words[i / 64] >> (i % 64)) & 1 == 1;
            let mut brute = 0u64;
            for i in 0..129 {
                for j in i + 1..129 {
                    if (i..j).all(bit) {
                        brute += 1;
                    }
                }
            }
            assert_eq!(count_linked_pairs(&words), brute);
        }
    }

    #[test]
    fn bernoulli_word_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bw = BernoulliWord::new(0.3);
        let ones: u64 = (0..20_000).map(|_| bw.sample(&mut rng).count_ones() as u64).sum();
        let n = 20_000.0 * 64.0;
        let rate = ones as f64 / n;
        let sd = (0.3f64 * 0.7 / n).sqrt();
        assert!((rate - 0.3).abs() < 4.0 * sd, "{rate}");
    }

    #[test]
    fn batch_correlation_cases() {
        let mk = |sources: &[u64]| -> Vec<Sample> {
            sources
                .iter()
                .enumerate()
                .map(|(i, &s)| Sample {
                    id: i as u64,
                    payload: vec![],
                    source: s,
                    class_label: 0,
                    arrival_tick: i as u64,
                })
                .collect()
        };
        assert_eq!(measure_batch_correlation(&[mk(&[4, 4, 4, 4])]), Some(1.0));
        assert_eq!(measure_batch_correlation(&[mk(&[1, 2, 3, 4])]), Some(0.0));
        let v = measure_batch_correlation(&[mk(&[1, 1, 2, 2])]).unwrap();
        assert!((v - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(measure_batch_correlation(&[mk(&[1]), mk(&[1, 1])]), Some(1.0));
        assert_eq!(measure_batch_correlation(&[mk(&[1])]), None);
    }

    #[test]
    fn fifo_reduction_cases() {
        let r = fifo_reduction_check(8, 8, 0.5).unwrap();
        assert_eq!(r.exact_ratio, 1.0);
        let r = fifo_reduction_check(16, 256, 0.5).unwrap();
        assert!(r.exact_ratio < 1.0);
        let r = fifo_reduction_check(256, 65536, 0.9).unwrap();
        assert!((r.exact_ratio / r.approx_ratio - 1.0).abs() < 0.1);
        assert!(fifo_reduction_check(16, 8, 0.5).is_err());
        assert!(fifo_reduction_check(8, 16, 1.0).is_err());
    }

    #[test]
    fn forgetting_formula() {
        let acc = vec![vec![0.8], vec![0.6]];
        let r = forgetting_curve(&acc, &[0]).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0].relative_drop.unwrap() + 0.25).abs() < 1e-15);

        let r = forgetting_curve(&[vec![0.8], vec![0.8]], &[0]).unwrap();
        assert_eq!(r[0].relative_drop, Some(0.0));

        let r = forgetting_curve(&[vec![0.8], vec![0.7], vec![0.6]], &[0]).unwrap();
        let drops: Vec<f64> = r.iter().map(|x| x.relative_drop.unwrap()).collect();
        assert!((drops[0] + 0.125).abs() < 1e-12 && (drops[1] + 0.25).abs() < 1e-12);

        let r = forgetting_curve(&[vec![0.0], vec![0.5]], &[0]).unwrap();
        assert_eq!(r[0].relative_drop, None);
    }

    #[test]
    fn openset_cases() {
        let sched = PartitionSchedule {
            partitions: vec![vec![0], vec![1], vec![2], vec![3]],
            samples_per_partition: 10,
            transition_fraction: 0.1,
            permutation: vec![0, 1, 2, 3],
        };
        let acc = vec![vec![0.9, 0.2, 0.3, 0.4], vec![0.5, 0.5, 0.5, 0.5], vec![0.1; 4]];
        let out = openset_accuracy(&acc, &[0, 2, 3], &sched);
        assert!((out[0].unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(out[1], Some(0.5));
        assert_eq!(out[2], None);
    }

    #[test]
    fn correlation_report_fields() {
        let rep = CorrelationReport::new(4, 16, 0.5, &[1, 2, 3, 3], &[1, 1, 2, 2, 3], 0.0).unwrap();
        assert!(rep.l_fifo < rep.l_seq);
        assert!((rep.l_minred_measured - 1.0 / 6.0).abs() < 1e-15);
        // buffer: 1/3 consecutive same; raw: 2/4
        assert!((rep.eta_effective - (1.0 / 3.0) / 0.5).abs() < 1e-15);
    }
}
