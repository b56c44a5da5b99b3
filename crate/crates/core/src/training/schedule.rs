use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, Ordering};

use log::warn;

use crate::error::{Error, Result};

/// Linear warmup to `lr_peak`, then one cosine half-cycle down to `lr_min`
/// at `max_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub lr_peak: f64,
    pub lr_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_steps: 4000,
            max_steps: 40000,
            lr_peak: 2.5e-4,
            lr_min: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.max_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.lr_peak >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_peak) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min ({}) <= lr_peak ({})",
                self.lr_min, self.lr_peak
            )));
        }
        Ok(())
    }
}

static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);

pub fn lr_at(step: u64, s: &ScheduleConfig) -> f64 {
    if step > s.max_steps {
        if !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
            warn!("step {step} is past max_steps {}; using lr_min", s.max_steps);
        }
        return s.lr_min;
    }
    if step < s.warmup_steps {
        return s.lr_peak * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.max_steps - s.warmup_steps) as f64;
    s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + (PI * progress).cos())
}
