use super::Init;
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::ForwardCtx;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub d_model: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Row `t` sees positions `t-window..=t` when set.
    pub window: Option<usize>,
    pub dropout: f64,
    pub name: String,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        window: Option<usize>,
        dropout: f64,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        if window == Some(0) {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        let shape = [d_model, d_model];
        Ok(AttentionParams {
            n_heads,
            d_model,
            w_q: init.weight(&format!("{prefix}.w_q"), &shape)?,
            w_k: init.weight(&format!("{prefix}.w_k"), &shape)?,
            w_v: init.weight(&format!("{prefix}.w_v"), &shape)?,
            w_o: init.weight(&format!("{prefix}.w_o"), &shape)?,
            window,
            dropout,
            name: prefix.to_string(),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Multi-head causal self-attention over `x: [B·seq_len × d_model]`.
pub fn causal_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    seq_len: usize,
    params: &AttentionParams,
    ctx: &ForwardCtx,
) -> Result<Var> {
    if params.window == Some(0) {
        return Err(Error::Config("attention window must be at least 1".into()));
    }
    let wq = tape.param(store, params.w_q);
    let wk = tape.param(store, params.w_k);
    let wv = tape.param(store, params.w_v);
    let wo = tape.param(store, params.w_o);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let mut rng = ctx.rng(&format!("{}.attn_drop", params.name));
    let ctx_vec = tape.attention(
        q,
        k,
        v,
        params.n_heads,
        seq_len,
        params.window,
        params.dropout,
        ctx.mode,
        &mut rng,
    )?;
    tape.matmul(ctx_vec, wo)
}
