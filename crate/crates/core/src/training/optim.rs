use std::fmt;
use std::str::FromStr;

use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected adam|sgd)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// Moments are kept per parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> OptimizerState<T> {
        let (m, v) = match config.kind {
            OptimizerKind::Adam => params
                .iter()
                .map(|(_, p)| (Tensor::zeros(p.tensor.shape()), Tensor::zeros(p.tensor.shape())))
                .unzip(),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        OptimizerState { config, m, v, step: 0 }
    }

    /// Clips (if configured) and applies one update with learning rate `lr`.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<f64> {
        let norm = match self.config.clip_norm {
            Some(c) => clip_grad_norm(params, c),
            None => grad_norm(params),
        };
        match self.config.kind {
            OptimizerKind::Adam => adam_step(params, self, lr)?,
            OptimizerKind::Sgd => sgd_step(params, self, lr)?,
        }
        Ok(norm)
    }
}

pub fn grad_norm<T: Scalar>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let scale = T::of(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

fn check_shapes<T: Scalar>(params: &ParamStore<T>, moments: &[Tensor<T>], op: &'static str) -> Result<()> {
    if moments.len() != params.len() {
        return Err(Error::shape(op, &[moments.len()], &[params.len()]));
    }
    for ((_, p), m) in params.iter().zip(moments) {
        if p.tensor.shape() != m.shape() {
            return Err(Error::shape(op, m.shape(), p.tensor.shape()));
        }
    }
    Ok(())
}

/// Bias-corrected Adam. Parameters without a gradient are left untouched.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if state.config.kind != OptimizerKind::Adam {
        return Err(Error::Config("adam_step called with non-adam optimizer state".into()));
    }
    check_shapes(params, &state.m, "adam_step")?;
    check_shapes(params, &state.v, "adam_step")?;
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        let theta = p.tensor.data_mut();
        for i in 0..theta.len() {
            let g = grad[i] + wd * theta[i];
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + one_b1 * g;
            let mi = *mi;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + one_b2 * g * g;
            let vi = *vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent, no momentum.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if state.config.kind != OptimizerKind::Sgd {
        return Err(Error::Config("sgd_step called with non-sgd optimizer state".into()));
    }
    state.step += 1;
    let (lr, wd) = (T::of(lr), T::of(state.config.weight_decay));
    for p in params.iter_mut() {
        let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        for (theta, g) in p.tensor.data_mut().iter_mut().zip(grad) {
            *theta -= lr * (g + wd * *theta);
        }
    }
    Ok(())
}
