use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamssl::learner::{
    augment, linear_probe, lr_at, negative_cosine, AugmentationConfig, LearnerConfig,
    LearnerState, LrSchedule, PredictorInit, ProbeConfig,
};
use streamssl::streams::Sample;

fn sample(id: u64, payload: Vec<f64>) -> Sample {
    Sample {
        id,
        payload,
        source: id,
        class_label: 0,
        arrival_tick: 0,
    }
}

#[test]
fn negative_cosine_matches_definition() {
    let t = [1.0, 2.0, -1.0];
    let p = [0.5, -1.0, 3.0];
    let (l, g) = negative_cosine(&t, &p).unwrap();
    let nt = (1.0f64 + 4.0 + 1.0).sqrt();
    let np = (0.25f64 + 1.0 + 9.0).sqrt();
    let dot = 0.5 - 2.0 - 3.0;
    assert!((l + dot / (nt * np)).abs() < 1e-15);
    // Scaling the prediction leaves the loss unchanged, so the gradient is
    // orthogonal to it.
    let radial: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
    assert!(radial.abs() < 1e-14);
    assert!(negative_cosine(&t, &[0.0; 3]).is_err());
}

#[test]
fn schedules() {
    let cos = LrSchedule::CosineFixedEnd {
        base_lr: 0.1,
        total_steps: 100,
    };
    assert!((lr_at(&cos, 0) - 0.1).abs() < 1e-15);
    assert!((lr_at(&cos, 50) - 0.05).abs() < 1e-12);
    assert!(lr_at(&cos, 100).abs() < 1e-15);
    assert_eq!(lr_at(&cos, 1000), 0.0);

    let flat = LrSchedule::Constant { base_lr: 0.3 };
    assert_eq!(lr_at(&flat, 12345), 0.3);

    let cpd = LrSchedule::ConstantPlusDecay {
        base_lr: 0.2,
        total_steps: 100,
        decay_start_fraction: 0.8,
    };
    assert_eq!(lr_at(&cpd, 0), 0.2);
    assert_eq!(lr_at(&cpd, 80), 0.2);
    assert!((lr_at(&cpd, 90) - 0.1).abs() < 1e-12);
    assert!(lr_at(&cpd, 100).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for s in 0..=100 {
        let lr = lr_at(&cpd, s);
        assert!(lr <= prev);
        prev = lr;
    }

    assert!(LrSchedule::Constant { base_lr: 0.0 }.validate().is_err());
    assert!(LrSchedule::ConstantPlusDecay {
        base_lr: 0.1,
        total_steps: 10,
        decay_start_fraction: 1.0
    }
    .validate()
    .is_err());
}

#[test]
fn augmentation_is_seeded() {
    let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
    let cfg = AugmentationConfig::default();
    assert_eq!(augment(&x, &cfg, 4), augment(&x, &cfg, 4));
    assert_ne!(augment(&x, &cfg, 4), augment(&x, &cfg, 5));
    assert_eq!(augment(&x, &AugmentationConfig::identity(), 4), x);
    let bad = AugmentationConfig {
        dropout_prob: 1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn training_is_deterministic_and_counts_steps() {
    let cfg = LearnerConfig {
        input_dim: 8,
        seed: 2,
        ..Default::default()
    };
    let batch: Vec<Sample> = (0..16)
        .map(|i| sample(i, (0..8).map(|k| ((i * 8 + k) as f64).sin()).collect()))
        .collect();
    let sched = LrSchedule::Constant { base_lr: 0.05 };
    let aug = AugmentationConfig::default();
    let mut a = LearnerState::new(cfg.clone()).unwrap();
    let mut b = LearnerState::new(cfg).unwrap();
    for step in 0..5 {
        let oa = a.train_step(&batch, &aug, &sched, step).unwrap();
        let ob = b.train_step(&batch, &aug, &sched, step).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(oa.embeddings.len(), 16);
        assert!((-2.0..=2.0).contains(&oa.loss));
    }
    assert_eq!(a, b);
    assert_eq!(a.step_count(), 5);
    assert!(a.is_finite());
}

#[test]
fn loss_falls_on_a_fixed_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<Sample> = (0..32)
        .map(|i| sample(i, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let mut st = LearnerState::new(LearnerConfig {
        input_dim: 16,
        predictor_init: PredictorInit::Random,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let aug = AugmentationConfig::identity();
    let sched = LrSchedule::Constant { base_lr: 0.05 };
    let first = st.train_step(&batch, &aug, &sched, 0).unwrap().loss;
    let mut last = first;
    for s in 1..50 {
        last = st.train_step(&batch, &aug, &sched, s).unwrap().loss;
    }
    assert!(last < first - 0.1, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip() {
    let mut st = LearnerState::new(LearnerConfig {
        input_dim: 4,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let batch: Vec<Sample> = (0..4)
        .map(|i| sample(i, vec![i as f64, 1.0, -1.0, 0.5]))
        .collect();
    st.train_step(
        &batch,
        &AugmentationConfig::default(),
        &LrSchedule::Constant { base_lr: 0.01 },
        0,
    )
    .unwrap();
    let path = std::env::temp_dir().join(format!("streamssl-ckpt-{}.json", std::process::id()));
    st.save_checkpoint(&path).unwrap();
    let back = LearnerState::load_checkpoint(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(back, st);
    assert_eq!(back.embed(&[1.0, 2.0, 3.0, 4.0]), st.embed(&[1.0, 2.0, 3.0, 4.0]));
}

#[test]
fn probe_separates_linear_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = [[3.0, 0.0], [-3.0, 0.0], [0.0, 3.0]];
    let mut make = |n: usize| {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % 3;
            xs.push(vec![
                centers[c][0] + rng.random_range(-1.0..1.0),
                centers[c][1] + rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            ys.push(c);
        }
        (xs, ys)
    };
    let (tx, ty) = make(90);
    let (vx, vy) = make(60);
    let r = linear_probe(&tx, &ty, &vx, &vy, 4, &ProbeConfig::default()).unwrap();
    assert_eq!(r.overall, 1.0);
    assert_eq!(r.absent_classes, vec![3]);
    assert_eq!(r.per_class[3], None);
    assert_eq!(r.group_accuracy(&[vec![0, 1], vec![3]]), vec![Some(1.0), None]);
    assert!(r.predictions().iter().all(|&p| p < 3));

    let again = linear_probe(&tx, &ty, &vx, &vy, 4, &ProbeConfig::default()).unwrap();
    assert_eq!(again, r);
    assert!(linear_probe(&tx, &ty[1..], &vx, &vy, 4, &ProbeConfig::default()).is_err());
}
