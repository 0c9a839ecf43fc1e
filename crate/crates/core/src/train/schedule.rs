use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{CromeError, Result};

/// Linear warmup from `lr_start` to `lr_peak`, then cosine decay to
/// `min_lr` at `max_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub max_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.max_steps {
            return Err(CromeError::Config(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.lr_start <= self.lr_peak) || self.min_lr < 0.0 || self.min_lr > self.lr_peak {
            return Err(CromeError::Config(format!(
                "need 0 <= min_lr <= lr_peak and lr_start <= lr_peak (got {}, {}, {})",
                self.min_lr, self.lr_start, self.lr_peak
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self)
    }
}

pub fn lr_at(step: usize, sched: &LrSchedule) -> f64 {
    let step = step.min(sched.max_steps);
    if step < sched.warmup_steps {
        let frac = step as f64 / sched.warmup_steps as f64;
        return sched.lr_start + frac * (sched.lr_peak - sched.lr_start);
    }
    let decay = sched.max_steps - sched.warmup_steps;
    if decay == 0 {
        return if step == sched.max_steps { sched.min_lr } else { sched.lr_peak };
    }
    let progress = (step - sched.warmup_steps) as f64 / decay as f64;
    sched.min_lr + 0.5 * (sched.lr_peak - sched.min_lr) * (1.0 + (PI * progress).cos())
}
