use std::collections::HashSet;
use std::thread;

use streamssl::buffer::{
    cosine_distance, BufferSnapshot, EvictionPolicy, Grouping, ReplayBuffer, SharedReplayBuffer,
    TrackedFeature,
};
use streamssl::streams::Sample;
use streamssl::Error;

fn sample(id: u64, class_label: usize) -> Sample {
    Sample {
        id,
        payload: vec![id as f64],
        source: id / 4,
        class_label,
        arrival_tick: id,
    }
}

fn batch(ids: std::ops::Range<u64>) -> Vec<Sample> {
    ids.map(|i| sample(i, (i % 3) as usize)).collect()
}

/// Unit vector along axis `k` of `d`, tilted by `eps` towards the last axis.
fn direction(k: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = 1.0;
    v[d - 1] += eps;
    v
}

#[test]
fn moving_average_feature() {
    let mut f = TrackedFeature::new(0.25);
    assert!(!f.initialized);
    f.update(&[4.0, 0.0]);
    assert_eq!(f.value, vec![4.0, 0.0]);
    f.update(&[0.0, 8.0]);
    assert_eq!(f.value, vec![1.0, 6.0]);
}

#[test]
fn cosine_distance_values() {
    assert!(cosine_distance(&[1.0, 0.0], &[2.0, 0.0]).abs() < 1e-15);
    assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
    assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
    assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
}

#[test]
fn minred_discards_redundant_copies_first() {
    let d = 12;
    let mut buf = ReplayBuffer::new(11, EvictionPolicy::MinRed).unwrap();
    buf.add(batch(0..10)).unwrap();
    let z: Vec<Vec<f64>> = (0..10).map(|k| direction(k, d, 0.0)).collect();
    buf.track_features(&(0..10).collect::<Vec<_>>(), &z).unwrap();
    buf.add(vec![sample(100, 0)]).unwrap();
    buf.track_features(&[100], &[direction(0, d, 1e-3)]).unwrap();

    // More near-copies of direction 0 arrive; each must push out a copy,
    // never a distinct direction.
    for (n, id) in (101..106).enumerate() {
        let evicted = buf.add(vec![sample(id, 0)]).unwrap();
        assert_eq!(evicted.len(), 1);
        assert!(evicted[0] == 0 || evicted[0] >= 100, "evicted {evicted:?}");
        buf.track_features(&[id], &[direction(0, d, 1e-3 * (n + 2) as f64)])
            .unwrap();
    }
    for k in 1..10 {
        assert!(buf.contains(k));
    }
}

#[test]
fn fifo_evicts_in_arrival_order() {
    let mut buf = ReplayBuffer::new(5, EvictionPolicy::Fifo).unwrap();
    assert!(buf.add(batch(0..5)).unwrap().is_empty());
    assert_eq!(buf.add(batch(5..8)).unwrap(), vec![0, 1, 2]);
    assert_eq!(buf.add(batch(8..13)).unwrap(), vec![3, 4, 5, 6, 7]);
    assert_eq!(buf.stats().evictions, 8);
    assert_eq!(buf.stats().inserts, 13);
}

#[test]
fn rejects_bad_batches() {
    let mut buf = ReplayBuffer::new(4, EvictionPolicy::MinRed).unwrap();
    assert!(matches!(buf.add(batch(0..5)), Err(Error::Config { .. })));
    buf.add(batch(0..2)).unwrap();
    assert!(buf.add(vec![sample(1, 0)]).is_err());
    assert!(buf.add(vec![sample(7, 0), sample(7, 0)]).is_err());
    assert_eq!(buf.len(), 2);
    assert!(ReplayBuffer::new(0, EvictionPolicy::Fifo).is_err());
    assert!(ReplayBuffer::with_alpha(4, EvictionPolicy::MinRed, 1.5).is_err());
}

#[test]
fn feature_updates_for_departed_ids_are_counted() {
    let mut buf = ReplayBuffer::new(2, EvictionPolicy::Fifo).unwrap();
    buf.add(batch(0..2)).unwrap();
    buf.add(batch(2..4)).unwrap();
    let skipped = buf
        .track_features(&[0, 3], &[vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap();
    assert_eq!(skipped, 1);
    assert_eq!(buf.stats().skipped_updates, 1);
    assert_eq!(buf.initialized_count(), 1);
    assert!(buf.track_features(&[3], &[vec![1.0]]).is_err());
    assert!(buf.track_features(&[3], &[vec![f64::NAN, 0.0]]).is_err());
}

#[test]
fn sampling_is_distinct_and_seeded() {
    let mut buf = ReplayBuffer::new(64, EvictionPolicy::Fifo).unwrap();
    buf.add(batch(0..64)).unwrap();
    let a = buf.sample_batch(32, 5).unwrap();
    let b = buf.sample_batch(32, 5).unwrap();
    let c = buf.sample_batch(32, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ids: HashSet<u64> = a.iter().map(|s| s.id).collect();
    assert_eq!(ids.len(), 32);
    assert!(matches!(
        buf.sample_batch(65, 0),
        Err(Error::InsufficientData {
            requested: 65,
            available: 64
        })
    ));
}

#[test]
fn uniform_sampling_frequencies() {
    let mut buf = ReplayBuffer::new(10, EvictionPolicy::Fifo).unwrap();
    buf.add(batch(0..10)).unwrap();
    let mut counts = [0usize; 10];
    let draws = 4000;
    for s in 0..draws {
        for x in buf.sample_batch(3, s).unwrap() {
            counts[x.id as usize] += 1;
        }
    }
    let expect = draws as f64 * 0.3;
    let sd = (draws as f64 * 0.3 * 0.7).sqrt();
    for c in counts {
        assert!((c as f64 - expect).abs() < 5.0 * sd, "{counts:?}");
    }
}

#[test]
fn composition_and_snapshot() {
    let mut buf = ReplayBuffer::new(8, EvictionPolicy::MinRed).unwrap();
    buf.add(batch(0..8)).unwrap();
    buf.track_features(&[0, 1], &[vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap();
    let by_class = buf.composition(Grouping::ByClass);
    assert_eq!(by_class.values().sum::<usize>(), 8);
    assert_eq!(by_class[&0], 3);
    assert_eq!(buf.composition(Grouping::BySource).len(), 2);

    let snap = buf.snapshot();
    let mut json = Vec::new();
    snap.write_json(&mut json).unwrap();
    let back = BufferSnapshot::read_json(json.as_slice()).unwrap();
    assert_eq!(back, snap);
    assert_eq!(back.entries.iter().filter(|e| e.feature.is_some()).count(), 2);
}

#[test]
fn shared_buffer_across_threads() {
    let shared = SharedReplayBuffer::new(ReplayBuffer::new(50, EvictionPolicy::MinRed).unwrap());
    let handles: Vec<_> = (0..4u64)
        .map(|t| {
            let b = shared.clone();
            thread::spawn(move || {
                for i in 0..25u64 {
                    let id = t * 1000 + i;
                    b.add(vec![sample(id, 0)]).unwrap();
                    b.track_features(&[id], &[vec![(t + 1) as f64, i as f64, 1.0]])
                        .unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(shared.len(), 50);
    assert_eq!(shared.stats().inserts, 100);
    assert_eq!(shared.stats().evictions, 50);
    assert_eq!(shared.with(|b| b.initialized_count()), 50);
}
