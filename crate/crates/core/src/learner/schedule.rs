use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Cosine decay from `base_lr` to zero at `total_steps`.
    CosineFixedEnd { base_lr: f64, total_steps: u64 },
    Constant { base_lr: f64 },
    /// Flat at `base_lr`, then a cosine decay over the last part of training.
    ConstantPlusDecay {
        base_lr: f64,
        total_steps: u64,
        #[serde(default = "default_decay_start")]
        decay_start_fraction: f64,
    },
}

fn default_decay_start() -> f64 {
    0.8
}

impl LrSchedule {
    pub fn base_lr(&self) -> f64 {
        match *self {
            LrSchedule::CosineFixedEnd { base_lr, .. }
            | LrSchedule::Constant { base_lr }
            | LrSchedule::ConstantPlusDecay { base_lr, .. } => base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr() > 0.0 && self.base_lr().is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        match *self {
            LrSchedule::CosineFixedEnd { total_steps, .. } if total_steps == 0 => {
                Err(Error::config("total_steps", "must be positive"))
            }
            LrSchedule::ConstantPlusDecay {
                total_steps,
                decay_start_fraction,
                ..
            } => {
                if total_steps == 0 {
                    return Err(Error::config("total_steps", "must be positive"));
                }
                if !(0.0..1.0).contains(&decay_start_fraction) {
                    return Err(Error::config("decay_start_fraction", "must lie in [0, 1)"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Learning rate at `step`. Decaying schedules return 0 past their end.
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr } => base_lr,
            LrSchedule::CosineFixedEnd { base_lr, total_steps } => {
                if step >= total_steps {
                    if step > total_steps {
                        log::warn!("step {step} past cosine schedule end {total_steps}");
                    }
                    return 0.0;
                }
                base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
            }
            LrSchedule::ConstantPlusDecay {
                base_lr,
                total_steps,
                decay_start_fraction,
            } => {
                if step >= total_steps {
                    if step > total_steps {
                        log::warn!("step {step} past schedule end {total_steps}");
                    }
                    return 0.0;
                }
                let start = decay_start_fraction * total_steps as f64;
                let t = step as f64;
                if t < start {
                    base_lr
                } else {
                    let frac = (t - start) / (total_steps as f64 - start);
                    base_lr * 0.5 * (1.0 + (PI * frac).cos())
                }
            }
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    schedule.lr_at(step)
}
