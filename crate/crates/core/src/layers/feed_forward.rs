use super::{Init, NormPosition, LAYER_NORM_EPS};
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::rng::ForwardCtx;
use crate::scalar::Scalar;

/// Switches that realize the residual/normalization ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualFlags {
    pub use_residual: bool,
    pub use_layernorm: bool,
    pub norm_position: NormPosition,
}

impl Default for ResidualFlags {
    fn default() -> Self {
        ResidualFlags {
            use_residual: true,
            use_layernorm: true,
            norm_position: NormPosition::Pre,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardBlockParams {
    pub w1: ParamId,
    pub w2: ParamId,
    /// `(gain, bias)`, allocated only when layer norm is on.
    pub ln: Option<(ParamId, ParamId)>,
    pub dropout: f64,
    pub flags: ResidualFlags,
    pub name: String,
}

impl FeedForwardBlockParams {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        prefix: &str,
        d_model: usize,
        d_hidden: usize,
        dropout: f64,
        flags: ResidualFlags,
    ) -> Result<Self> {
        Ok(FeedForwardBlockParams {
            w1: init.weight(&format!("{prefix}.w1"), &[d_model, d_hidden])?,
            w2: init.weight(&format!("{prefix}.w2"), &[d_hidden, d_model])?,
            ln: layer_norm_params(init, flags, prefix, d_model)?,
            dropout,
            flags,
            name: prefix.to_string(),
        })
    }
}

/// Gain and bias for the sublayer norm, or `None` when `flags` disable it.
pub fn layer_norm_params<T: Scalar>(
    init: &mut Init<'_, T>,
    flags: ResidualFlags,
    prefix: &str,
    d: usize,
) -> Result<Option<(ParamId, ParamId)>> {
    if !flags.use_layernorm {
        return Ok(None);
    }
    Ok(Some((
        init.ones(&format!("{prefix}.ln.gain"), &[d])?,
        init.zeros(&format!("{prefix}.ln.bias"), &[d])?,
    )))
}

/// Wraps `sublayer` with dropout, layer norm and the residual path.
///
/// Pre-norm: `x + drop(f(LN(x)))`. Post-norm: `LN(x + drop(f(x)))`.
#[allow(clippy::too_many_arguments)]
pub fn residual_sublayer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    ln: Option<(ParamId, ParamId)>,
    flags: ResidualFlags,
    dropout: f64,
    ctx: &ForwardCtx,
    name: &str,
    sublayer: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let norm = |tape: &mut Tape<T>, v: Var, (g, b): (ParamId, ParamId)| -> Result<Var> {
        let g = tape.param(store, g);
        let b = tape.param(store, b);
        tape.layer_norm(v, g, b, T::of(LAYER_NORM_EPS))
    };
    let ln = ln.filter(|_| flags.use_layernorm);
    let pre = ln.filter(|_| flags.norm_position == NormPosition::Pre);
    let post = ln.filter(|_| flags.norm_position == NormPosition::Post);
    let input = match pre {
        Some(p) => norm(tape, x, p)?,
        None => x,
    };
    let out = sublayer(tape, input)?;
    let mut rng = ctx.rng(&format!("{name}.drop"));
    let out = tape.dropout(out, dropout, ctx.mode, &mut rng)?;
    let out = if flags.use_residual { tape.add(x, out)? } else { out };
    match post {
        Some(p) => norm(tape, out, p),
        None => Ok(out),
    }
}

/// `x + dropout(w2 · relu(w1 · LN(x)))` with the ablation switches applied.
pub fn feed_forward_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &FeedForwardBlockParams,
    ctx: &ForwardCtx,
) -> Result<Var> {
    residual_sublayer(
        tape,
        store,
        x,
        params.ln,
        params.flags,
        params.dropout,
        ctx,
        &params.name,
        |tape, h| {
            let w1 = tape.param(store, params.w1);
            let w2 = tape.param(store, params.w2);
            let h = tape.matmul(h, w1)?;
            let h = tape.relu(h);
            tape.matmul(h, w2)
        },
    )
}
