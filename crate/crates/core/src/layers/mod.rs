//! Building blocks shared by every model variant.

mod attention;
mod concat;
mod feed_forward;
mod output;

pub use attention::{causal_self_attention, AttentionParams};
pub use concat::{concat_layer_forward, concat_window, global_context_embed, ConcatLayerParams, GlobalKernelParams};
pub use feed_forward::{feed_forward_block, layer_norm_params, residual_sublayer, FeedForwardBlockParams, ResidualFlags};
pub use output::{
    adaptive_log_prob_table, adaptive_nll, adaptive_target_log_probs, tied_output_logits, validate_cutoffs,
    AdaptiveSoftmaxParams, TailCluster,
};

use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Standard deviation of every initial weight matrix.
pub const INIT_STD: f64 = 0.02;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?} (expected tanh|relu)"))),
        }
    }
}

/// How distant context outside the concatenation window is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GlobalMode {
    LearnedKernel,
    UniformAverage,
    Disabled,
}

impl GlobalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GlobalMode::LearnedKernel => "learned_kernel",
            GlobalMode::UniformAverage => "uniform_average",
            GlobalMode::Disabled => "disabled",
        }
    }
}

impl std::str::FromStr for GlobalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned_kernel" => Ok(GlobalMode::LearnedKernel),
            "uniform_average" => Ok(GlobalMode::UniformAverage),
            "disabled" => Ok(GlobalMode::Disabled),
            other => Err(Error::Config(format!(
                "unknown global_mode {other:?} (expected learned_kernel|uniform_average|disabled)"
            ))),
        }
    }
}

/// Where layer normalization sits relative to a residual sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormPosition {
    Pre,
    Post,
}

impl NormPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            NormPosition::Pre => "pre",
            NormPosition::Post => "post",
        }
    }
}

impl std::str::FromStr for NormPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(NormPosition::Pre),
            "post" => Ok(NormPosition::Post),
            other => Err(Error::Config(format!("unknown norm_position {other:?} (expected pre|post)"))),
        }
    }
}

/// Parameter factory: draws each tensor from its own named stream so that
/// initial values depend only on `(seed, name)`.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<T: Scalar> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let mut rng = rng::stream(self.seed, u64::MAX, name);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(&mut rng)));
        self.store.add(name, t)
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.normal(name, shape, INIT_STD)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::filled(shape, T::one()))
    }
}

#[cfg(test)]
mod tests;
