//! Optimizers, learning-rate schedule, the training loop and checkpoints.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, checkpoint_load, checkpoint_load_matching, checkpoint_model_config,
    checkpoint_save, config_diff, config_hash, decode, encode_file, CheckpointFile, MAGIC, VERSION,
};
pub use optim::{adam_step, clip_grad_norm, grad_norm, sgd_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use schedule::{lr_at, ScheduleConfig};
pub use trainer::{mean_nll, train_loop, train_step, TrainConfig, TrainEvent, TrainState};

use crate::kv::{format_opt_f64, parse, parse_opt_f64, KeyValue};

impl KeyValue for ScheduleConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("warmup_steps", self.warmup_steps.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("lr_min", self.lr_min.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "warmup_steps" => self.warmup_steps = parse(key, value, "a non-negative integer")?,
            "max_steps" => self.max_steps = parse(key, value, "a non-negative integer")?,
            "lr_peak" => self.lr_peak = parse(key, value, "a number")?,
            "lr_min" => self.lr_min = parse(key, value, "a number")?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl KeyValue for OptimizerConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("optimizer", self.kind.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", format_opt_f64(self.clip_norm)),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        match key {
            "optimizer" => self.kind = value.parse().map_err(|e: crate::Error| format!("type error: {e}"))?,
            "beta1" => self.beta1 = parse(key, value, "a number")?,
            "beta2" => self.beta2 = parse(key, value, "a number")?,
            "adam_eps" => self.eps = parse(key, value, "a number")?,
            "weight_decay" => self.weight_decay = parse(key, value, "a number")?,
            "clip_norm" => self.clip_norm = parse_opt_f64(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
