//! Siamese self-supervised learner on vector data: a two-layer encoder, a
//! linear predictor, the symmetric stop-gradient loss, SGD with momentum and
//! weight decay, and linear-probe evaluation.

mod augment;
mod loss;
mod nn;
mod probe;
mod schedule;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::streams::Sample;

pub use augment::{augment, augment_with, AugmentationConfig};
pub use loss::{branch_loss, negative_cosine, simsiam_loss, LossGrads};
pub use nn::{Dense, Encoder, EncoderTrace};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};
pub use schedule::{lr_at, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub predictor_init: PredictorInit,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorInit {
    #[default]
    Identity,
    Random,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            input_dim: 32,
            hidden_dim: 64,
            embed_dim: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            predictor_init: PredictorInit::Identity,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Parameter gradients, laid out like the networks they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Encoder,
    pub predictor: Dense,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for d in [&self.encoder.hidden, &self.encoder.output, &self.predictor] {
            out.extend_from_slice(&d.weight);
            out.extend_from_slice(&d.bias);
        }
        out
    }
}

/// Encoder, predictor and SGD state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub config: LearnerConfig,
    pub encoder: Encoder,
    pub predictor: Dense,
    encoder_velocity: Encoder,
    predictor_velocity: Dense,
    step_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub lr: f64,
    /// `(z1 + z2) / 2` per sample, in batch order.
    pub embeddings: Vec<Vec<f64>>,
}

impl LearnerState {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::init(config.input_dim, config.hidden_dim, config.embed_dim, &mut rng);
        let predictor = match config.predictor_init {
            PredictorInit::Identity => Dense::identity(config.embed_dim),
            PredictorInit::Random => Dense::init(config.embed_dim, config.embed_dim, &mut rng),
        };
        Ok(LearnerState {
            encoder_velocity: encoder.zeros_like(),
            predictor_velocity: predictor.zeros_like(),
            encoder,
            predictor,
            config,
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x)
    }

    pub fn embed_batch(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.encoder.forward(x)).collect()
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.encoder.hidden,
            &self.encoder.output,
            &self.predictor,
            &self.encoder_velocity.hidden,
            &self.encoder_velocity.output,
            &self.predictor_velocity,
        ]
        .iter()
        .all(|d| d.is_finite())
    }

    /// One optimisation step on two random views of every sample.
    ///
    /// On a non-finite loss or gradient the state is left untouched and the
    /// error carries a diagnostic.
    pub fn train_step(
        &mut self,
        batch: &[Sample],
        aug: &AugmentationConfig,
        schedule: &LrSchedule,
        seed: u64,
    ) -> Result<StepOutput> {
        if batch.is_empty() {
            return Err(Error::InsufficientData {
                requested: 1,
                available: 0,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views: Vec<(Vec<f64>, Vec<f64>)> = batch
            .iter()
            .map(|s| {
                let a = augment_with(&s.payload, aug, &mut rng);
                let b = augment_with(&s.payload, aug, &mut rng);
                (a, b)
            })
            .collect();
        let lr = schedule.lr_at(self.step_count);
        let (loss, grads, embeddings) = match batch_gradient(&self.encoder, &self.predictor, &views, None) {
            Ok(r) => r,
            Err(Error::Degenerate(msg)) => {
                return Err(Error::NonFiniteLoss {
                    step: self.step_count,
                    diagnostic: msg,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.flatten().iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step_count,
                diagnostic: format!("loss {loss}, lr {lr}, batch size {}", batch.len()),
            });
        }
        self.apply_sgd(&grads, lr);
        self.step_count += 1;
        Ok(StepOutput { loss, lr, embeddings })
    }

    fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        sgd_update(&mut self.encoder.hidden, &mut self.encoder_velocity.hidden, &grads.encoder.hidden, lr, mu, wd);
        sgd_update(&mut self.encoder.output, &mut self.encoder_velocity.output, &grads.encoder.output, lr, mu, wd);
        sgd_update(&mut self.predictor, &mut self.predictor_velocity, &grads.predictor, lr, mu, wd);
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let state: LearnerState = serde_json::from_reader(file)?;
        state.config.validate()?;
        if !state.is_finite() {
            return Err(Error::Domain("checkpoint holds non-finite parameters".into()));
        }
        Ok(state)
    }
}

/// `v ← μv + (g + λw)`, `w ← w − lr·v`.
fn sgd_update(w: &mut Dense, v: &mut Dense, g: &Dense, lr: f64, mu: f64, wd: f64) {
    let pairs = [(&mut w.weight, &mut v.weight, &g.weight), (&mut w.bias, &mut v.bias, &g.bias)];
    for (w, v, g) in pairs {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= lr * *vi;
        }
    }
}

/// Mean loss over `views` and its parameter gradient.
///
/// Each pair's targets are its own embeddings under stop-gradient. Passing
/// `targets` replaces them with fixed vectors, which turns the loss into an
/// ordinary differentiable function of the parameters; the gradient is the
/// same whenever `targets` equals the embeddings.
/// Also returns `(z1 + z2) / 2` for every pair.
pub fn batch_gradient(
    encoder: &Encoder,
    predictor: &Dense,
    views: &[(Vec<f64>, Vec<f64>)],
    targets: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<(f64, Gradients, Vec<Vec<f64>>)> {
    let n = views.len();
    if let Some(t) = targets {
        if t.len() != n {
            return Err(Error::Domain("targets and views differ in length".into()));
        }
    }
    let scale = 1.0 / n as f64;
    let mut g_enc = encoder.zeros_like();
    let mut g_pred = predictor.zeros_like();
    let mut t1 = EncoderTrace::default();
    let mut t2 = EncoderTrace::default();
    let mut total = 0.0;
    let mut means = Vec::with_capacity(n);
    let mut d_scaled = vec![0.0; encoder.embed_dim()];
    for (i, (a, b)) in views.iter().enumerate() {
        encoder.forward_traced(a, &mut t1);
        encoder.forward_traced(b, &mut t2);
        let (tgt1, tgt2) = match targets {
            Some(t) => (t[i].0.as_slice(), t[i].1.as_slice()),
            None => (t1.embedding.as_slice(), t2.embedding.as_slice()),
        };
        let mut pred_grad = predictor.zeros_like();
        let (l12, d_z2) = branch_loss(tgt1, &t2.embedding, predictor, &mut pred_grad)?;
        let (l21, d_z1) = branch_loss(tgt2, &t1.embedding, predictor, &mut pred_grad)?;
        total += l12 + l21;
        loss::accumulate(&mut g_pred, &pred_grad, scale);
        for (d, s) in d_scaled.iter_mut().zip(&d_z1) {
            *d = s * scale;
        }
        encoder.backward(&t1, &d_scaled, &mut g_enc);
        for (d, s) in d_scaled.iter_mut().zip(&d_z2) {
            *d = s * scale;
        }
        encoder.backward(&t2, &d_scaled, &mut g_enc);
        means.push(
            t1.embedding
                .iter()
                .zip(&t2.embedding)
                .map(|(x, y)| 0.5 * (x + y))
                .collect(),
        );
    }
    Ok((
        total * scale,
        Gradients {
            encoder: g_enc,
            predictor: g_pred,
        },
        means,
    ))
}

/// Mean loss with fixed targets, without gradients.
pub fn loss_with_targets(
    encoder: &Encoder,
    predictor: &Dense,
    views: &[(Vec<f64>, Vec<f64>)],
    targets: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut p = vec![0.0; predictor.out_dim];
    for ((a, b), (t1, t2)) in views.iter().zip(targets) {
        predictor.forward(&encoder.forward(b), &mut p);
        total += negative_cosine(t1, &p)?.0;
        predictor.forward(&encoder.forward(a), &mut p);
        total += negative_cosine(t2, &p)?.0;
    }
    Ok(total / views.len() as f64)
}

/// Parameters of encoder and predictor as one flat vector, in the order of
/// [`Gradients::flatten`].
pub fn flatten_params(encoder: &Encoder, predictor: &Dense) -> Vec<f64> {
    Gradients {
        encoder: encoder.clone(),
        predictor: predictor.clone(),
    }
    .flatten()
}

/// Mutable access to the `index`-th parameter in flattened order.
pub fn param_mut<'a>(encoder: &'a mut Encoder, predictor: &'a mut Dense, mut index: usize) -> &'a mut f64 {
    for t in nn::tensors_mut(encoder, predictor) {
        if index < t.len() {
            return &mut t[index];
        }
        index -= t.len();
    }
    panic!("parameter index out of range");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, payload: Vec<f64>) -> Sample {
        Sample {
            id,
            payload,
            source: id,
            class_label: 0,
            arrival_tick: 0,
        }
    }

    fn toy_batch(n: usize, d: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let payload = (0..d).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0).collect();
                sample(i as u64, payload)
            })
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_and_counts_step() {
        let mut s = LearnerState::new(LearnerConfig::default()).unwrap();
        let before = s.clone();
        let out = s
            .train_step(&toy_batch(8, 32), &AugmentationConfig::default(), &LrSchedule::Constant { base_lr: 0.0 }, 1)
            .unwrap();
        assert_eq!(out.lr, 0.0);
        assert_eq!(s.encoder, before.encoder);
        assert_eq!(s.predictor, before.predictor);
        assert_eq!(s.step_count(), 1);
        assert_eq!(out.embeddings.len(), 8);
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let cfg = LearnerConfig {
            predictor_init: PredictorInit::Random,
            ..Default::default()
        };
        let mut s = LearnerState::new(cfg).unwrap();
        let batch = toy_batch(32, 32);
        let aug = AugmentationConfig::identity();
        let sched = LrSchedule::Constant { base_lr: 0.05 };
        let first = s.train_step(&batch, &aug, &sched, 0).unwrap().loss;
        let mut last = first;
        for step in 1..50 {
            let l = s.train_step(&batch, &aug, &sched, step).unwrap().loss;
            assert!(l <= last + 1e-9, "step {step}: {l} > {last}");
            last = l;
        }
        assert!(last < first);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut s = LearnerState::new(LearnerConfig::default()).unwrap();
            let sched = LrSchedule::Constant { base_lr: 0.05 };
            for step in 0..5 {
                s.train_step(&toy_batch(16, 32), &AugmentationConfig::default(), &sched, step)
                    .unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut s = LearnerState::new(LearnerConfig::default()).unwrap();
        let r = s.train_step(&[], &AugmentationConfig::default(), &LrSchedule::Constant { base_lr: 0.1 }, 0);
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_input_aborts_without_update() {
        let mut s = LearnerState::new(LearnerConfig::default()).unwrap();
        let before = s.clone();
        let mut batch = toy_batch(4, 32);
        batch[0].payload[0] = f64::NAN;
        let r = s.train_step(&batch, &AugmentationConfig::identity(), &LrSchedule::Constant { base_lr: 0.1 }, 0);
        assert!(matches!(r, Err(Error::NonFiniteLoss { step: 0, .. })));
        assert_eq!(s, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = LearnerState::new(LearnerConfig::default()).unwrap();
        s.train_step(&toy_batch(8, 32), &AugmentationConfig::default(), &LrSchedule::Constant { base_lr: 0.05 }, 3)
            .unwrap();
        let dir = std::env::temp_dir().join(format!("streamssl-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.json");
        s.save_checkpoint(&path).unwrap();
        let back = LearnerState::load_checkpoint(&path).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn flattened_parameter_indexing() {
        let mut s = LearnerState::new(LearnerConfig::default()).unwrap();
        let flat = flatten_params(&s.encoder, &s.predictor);
        let last = flat.len() - 1;
        assert_eq!(*param_mut(&mut s.encoder, &mut s.predictor, last), flat[last]);
        assert_eq!(*param_mut(&mut s.encoder, &mut s.predictor, 0), flat[0]);
    }
}
