use std::fmt;
use std::path::PathBuf;

use log::info;

use super::checkpoint::checkpoint_save;
use super::optim::{OptimizerConfig, OptimizerState};
use super::schedule::{lr_at, ScheduleConfig};
use crate::autograd::Tape;
use crate::data::{contiguous_batches, Batch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::ForwardCtx;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Validation cadence in steps; 0 disables periodic validation.
    pub eval_every: u64,
    pub log_every: u64,
    pub seed: u64,
    /// Written whenever validation improves.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            seq_len: 64,
            eval_every: 500,
            log_every: 50,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState<T = f32> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Completed updates.
    pub step: u64,
    pub loss_sum: f64,
    pub loss_count: u64,
    pub last_loss: f64,
    pub best_valid: Option<f64>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, config: &TrainConfig) -> Result<TrainState<T>> {
        config.schedule.validate()?;
        let optimizer = OptimizerState::new(config.optimizer, &model.params);
        Ok(TrainState {
            model,
            optimizer,
            schedule: config.schedule,
            seed: config.seed,
            step: 0,
            loss_sum: 0.0,
            loss_count: 0,
            last_loss: f64::NAN,
            best_valid: None,
        })
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.loss_count.max(1) as f64
    }
}

/// Log records; `Display` gives the machine-readable line.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step { step: u64, lr: f64, loss: f64 },
    Valid { step: u64, loss: f64, ppl: f64 },
    Checkpoint { step: u64, path: PathBuf },
}

impl fmt::Display for TrainEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainEvent::Step { step, lr, loss } => write!(f, "step={step} lr={lr:e} loss={loss:.6}"),
            TrainEvent::Valid { step, loss, ppl } => {
                write!(f, "valid_step={step} valid_loss={loss:.6} valid_ppl={ppl:.4}")
            }
            TrainEvent::Checkpoint { step, path } => write!(f, "checkpoint_step={step} path={}", path.display()),
        }
    }
}

/// One update: forward in train mode, backward, clip, optimizer step.
/// Returns the batch loss.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch) -> Result<f64> {
    let step = state.step + 1;
    let lr = lr_at(step, &state.schedule);
    let ctx = ForwardCtx::train(state.seed, step);
    let mut tape = Tape::new();
    let loss = state
        .model
        .loss(&mut tape, &batch.inputs, &batch.targets, batch.seq_len, &ctx)?;
    let value = tape.data(loss)[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, lr, loss: value });
    }
    state.model.params.zero_grads();
    tape.backward(loss, &mut state.model.params)?;
    state.optimizer.step(&mut state.model.params, lr)?;
    state.model.params.zero_grads();
    state.step = step;
    state.loss_sum += value;
    state.loss_count += 1;
    state.last_loss = value;
    Ok(value)
}

/// Mean next-token NLL over contiguous batches of `ids`, eval mode.
pub fn mean_nll<T: Scalar>(model: &Model<T>, ids: &[usize], batch_size: usize, seq_len: usize) -> Result<f64> {
    let stream = contiguous_batches(ids, batch_size, seq_len)?;
    let ctx = ForwardCtx::eval();
    let (mut total, mut count) = (0.0, 0usize);
    for batch in stream {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &batch.inputs, &batch.targets, batch.seq_len, &ctx)?;
        total += tape.data(loss)[0].as_f64() * batch.targets.len() as f64;
        count += batch.targets.len();
    }
    Ok(total / count as f64)
}

/// Runs until `schedule.max_steps`. Batch `i` of an epoch is a pure function
/// of the step counter, so a resumed state continues the same trajectory.
pub fn train_loop<T: Scalar>(
    config: &TrainConfig,
    mut state: TrainState<T>,
    train: &[usize],
    valid: &[usize],
    on_event: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainState<T>> {
    let stream = contiguous_batches(train, config.batch_size, config.seq_len)?;
    let max = state.schedule.max_steps;
    info!(
        "training {} for {} steps ({} parameters, {} steps per epoch)",
        state.model.config.variant,
        max,
        state.model.count_parameters(),
        stream.steps_per_epoch()
    );
    while state.step < max {
        let batch = stream.batch(state.step as usize);
        let loss = train_step(&mut state, &batch)?;
        let step = state.step;
        if config.log_every > 0 && (step.is_multiple_of(config.log_every) || step == max) {
            on_event(&TrainEvent::Step {
                step,
                lr: lr_at(step, &state.schedule),
                loss,
            });
        }
        let due = config.eval_every > 0 && (step.is_multiple_of(config.eval_every) || step == max);
        if due && !valid.is_empty() {
            let loss = mean_nll(&state.model, valid, config.batch_size, config.seq_len)?;
            on_event(&TrainEvent::Valid {
                step,
                loss,
                ppl: loss.exp(),
            });
            if state.best_valid.is_none_or(|b| loss < b) {
                state.best_valid = Some(loss);
                if let Some(path) = &config.checkpoint_path {
                    checkpoint_save(&state, path)?;
                    on_event(&TrainEvent::Checkpoint {
                        step,
                        path: path.clone(),
                    });
                }
            }
        }
    }
    Ok(state)
}
