use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random view generation for vector payloads: global rescaling, coordinate
/// dropout, then additive Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub noise_scale: f64,
    pub dropout_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            noise_scale: 0.5,
            dropout_prob: 0.1,
            scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            noise_scale: 0.0,
            dropout_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config("dropout_prob", "must lie in [0, 1)"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("scale_range", "need 0 < lo <= hi"));
        }
        Ok(())
    }
}

pub fn augment(x: &[f64], cfg: &AugmentationConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with(x, cfg, &mut rng)
}

pub fn augment_with<R: Rng + ?Sized>(x: &[f64], cfg: &AugmentationConfig, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    x.iter()
        .map(|&v| {
            let mut out = v * scale;
            if cfg.dropout_prob > 0.0 && rng.random_bool(cfg.dropout_prob) {
                out = 0.0;
            }
            if cfg.noise_scale > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                out += cfg.noise_scale * e;
            }
            out
        })
        .collect()
}
