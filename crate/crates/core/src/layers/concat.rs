use super::{Activation, GlobalMode, Init};
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learned or averaged summaries of the tokens before the local window.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalKernelParams {
    pub mode: GlobalMode,
    pub n_kernels: usize,
    pub kernel_width: usize,
    /// `[n_kernels × kernel_width]`; `None` unless `mode` is learned.
    pub kernels: Option<ParamId>,
}

impl GlobalKernelParams {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        prefix: &str,
        mode: GlobalMode,
        n_kernels: usize,
        kernel_width: usize,
    ) -> Result<Self> {
        if kernel_width == 0 {
            return Err(Error::Config("global kernel width must be at least 1".into()));
        }
        let kernels = match mode {
            GlobalMode::LearnedKernel => {
                if n_kernels == 0 {
                    return Err(Error::Config("learned_kernel mode needs at least one kernel".into()));
                }
                Some(init.weight(&format!("{prefix}.kernels"), &[n_kernels, kernel_width])?)
            }
            _ => None,
        };
        Ok(GlobalKernelParams {
            mode,
            n_kernels,
            kernel_width,
            kernels,
        })
    }

    /// Number of `d_emb`-sized vectors appended per row.
    pub fn embeddings_per_row(&self) -> usize {
        match self.mode {
            GlobalMode::LearnedKernel => self.n_kernels,
            GlobalMode::UniformAverage => 1,
            GlobalMode::Disabled => 0,
        }
    }
}

/// Parameters of the windowed concatenation layer:
/// `proj · act(w_concat · [x_window ; global] + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatLayerParams {
    pub k: usize,
    pub d_in: usize,
    pub d_concat: usize,
    pub d_out: usize,
    pub activation: Activation,
    pub w_concat: ParamId,
    pub bias: ParamId,
    pub proj: ParamId,
    pub pad_embedding: ParamId,
    pub global: Option<GlobalKernelParams>,
    /// When set, row `t` covers positions `t-k+1..=t` (next-token
    /// prediction from a prefix ending at `t`); otherwise `t-k..t-1`.
    pub include_current: bool,
}

impl ConcatLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        prefix: &str,
        k: usize,
        d_in: usize,
        d_concat: usize,
        d_out: usize,
        activation: Activation,
        global: Option<GlobalKernelParams>,
        include_current: bool,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("concat window k must be at least 1".into()));
        }
        let g = global.as_ref().map_or(0, GlobalKernelParams::embeddings_per_row);
        Ok(ConcatLayerParams {
            k,
            d_in,
            d_concat,
            d_out,
            activation,
            w_concat: init.weight(&format!("{prefix}.w_concat"), &[(k + g) * d_in, d_concat])?,
            bias: init.zeros(&format!("{prefix}.bias"), &[d_concat])?,
            proj: init.weight(&format!("{prefix}.proj"), &[d_concat, d_out])?,
            pad_embedding: init.weight(&format!("{prefix}.pad"), &[d_in])?,
            global,
            include_current,
        })
    }

    fn shift(&self) -> usize {
        usize::from(self.include_current)
    }
}

/// Row `t` (predicting token `t`) is `[x_{t-k}; …; x_{t-1}]`, with
/// `pad_embedding` standing in before the sequence start.
pub fn concat_window<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, k: usize, pad: Var, seq_len: usize) -> Result<Var> {
    tape.window_concat(embeddings, pad, k, seq_len, 0)
}

/// Aggregates of the positions strictly before each row's window.
pub fn global_context_embed<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embeddings: Var,
    k: usize,
    seq_len: usize,
    params: &GlobalKernelParams,
    include_current: bool,
) -> Result<Var> {
    let shift = usize::from(include_current);
    match params.mode {
        GlobalMode::Disabled => Err(Error::Config("global context requested with mode disabled".into())),
        GlobalMode::UniformAverage => tape.global_context(embeddings, None, k, seq_len, shift),
        GlobalMode::LearnedKernel => {
            let id = params
                .kernels
                .ok_or_else(|| Error::Config("learned_kernel mode without kernel weights".into()))?;
            let kv = tape.param(store, id);
            tape.global_context(embeddings, Some(kv), k, seq_len, shift)
        }
    }
}

pub fn concat_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embeddings: Var,
    seq_len: usize,
    params: &ConcatLayerParams,
) -> Result<Var> {
    let (_, d) = tape.value(embeddings).dims2("concat_layer")?;
    if d != params.d_in {
        return Err(Error::shape("concat_layer", tape.shape(embeddings), &[params.d_in]));
    }
    let pad = tape.param(store, params.pad_embedding);
    let local = tape.window_concat(embeddings, pad, params.k, seq_len, params.shift())?;
    let features = match &params.global {
        Some(g) if g.mode != GlobalMode::Disabled => {
            let global = global_context_embed(tape, store, embeddings, params.k, seq_len, g, params.include_current)?;
            tape.concat_cols(&[local, global])?
        }
        _ => local,
    };
    let w = tape.param(store, params.w_concat);
    let b = tape.param(store, params.bias);
    let hidden = tape.matmul(features, w)?;
    let hidden = tape.add(hidden, b)?;
    let hidden = match params.activation {
        Activation::Tanh => tape.tanh(hidden),
        Activation::Relu => tape.relu(hidden),
    };
    let proj = tape.param(store, params.proj);
    tape.matmul(hidden, proj)
}
