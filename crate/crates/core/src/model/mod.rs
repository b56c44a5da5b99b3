//! The five model variants assembled from one declarative config.

mod config;

pub use config::{ModelConfig, ModelVariant};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    adaptive_log_prob_table, adaptive_nll, causal_self_attention, concat_layer_forward, feed_forward_block,
    layer_norm_params, residual_sublayer, tied_output_logits, AdaptiveSoftmaxParams, AttentionParams,
    ConcatLayerParams, FeedForwardBlockParams, GlobalKernelParams, GlobalMode, Init, NormPosition, ResidualFlags,
    LAYER_NORM_EPS,
};
use crate::rng::ForwardCtx;
use crate::scalar::Scalar;

/// First sublayer of a Transformer-family block.
#[derive(Debug, Clone, PartialEq)]
enum Mixer {
    Attention(AttentionParams),
    Concat(ConcatLayerParams),
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    mixer: Mixer,
    mixer_ln: Option<(ParamId, ParamId)>,
    name: String,
    ff: FeedForwardBlockParams,
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Full,
    Adaptive(AdaptiveSoftmaxParams),
}

#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    embedding: ParamId,
    /// Output table when weights are untied.
    output_table: Option<ParamId>,
    /// `d_model → d_emb` projection for tied heads with mismatched widths.
    tie_proj: Option<ParamId>,
    stem: Option<ConcatLayerParams>,
    ff_stack: Vec<FeedForwardBlockParams>,
    blocks: Vec<Block>,
    final_ln: Option<(ParamId, ParamId)>,
    head: Head,
}

pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let c = config;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, seed };
    let flags = ResidualFlags {
        use_residual: c.use_residual,
        use_layernorm: c.use_layernorm,
        norm_position: c.norm_position,
    };
    let embedding = init.weight("embedding", &[c.vocab_size, c.d_emb])?;

    let mut stem = None;
    let mut ff_stack = Vec::new();
    let mut blocks = Vec::new();
    match c.variant {
        ModelVariant::NplmOld | ModelVariant::Nplm => {
            let old = c.variant == ModelVariant::NplmOld;
            let global = match c.effective_global_mode() {
                GlobalMode::Disabled => None,
                mode => Some(GlobalKernelParams::new(
                    &mut init,
                    "stem.global",
                    mode,
                    c.n_global_kernels,
                    c.global_kernel_width,
                )?),
            };
            let d_concat = if old { c.d_hidden } else { c.d_concat };
            stem = Some(ConcatLayerParams::new(
                &mut init,
                "stem",
                c.k_concat,
                c.d_emb,
                d_concat,
                c.d_model,
                c.activation,
                global,
                true,
            )?);
            for i in 1..c.n_layers {
                ff_stack.push(FeedForwardBlockParams::new(
                    &mut init,
                    &format!("l{i}.ff"),
                    c.d_model,
                    c.d_hidden,
                    c.dropout,
                    flags,
                )?);
            }
        }
        _ => {
            for i in 0..c.n_layers {
                let name = format!("l{i}");
                let mixer = match (c.variant, i) {
                    (ModelVariant::TransformerN, 0) => Mixer::Concat(ConcatLayerParams::new(
                        &mut init,
                        &format!("{name}.concat"),
                        c.k_concat,
                        c.d_model,
                        c.d_concat,
                        c.d_model,
                        c.activation,
                        None,
                        true,
                    )?),
                    (variant, _) => {
                        let window = (variant == ModelVariant::TransformerC && i == 0).then_some(c.l0_window);
                        Mixer::Attention(AttentionParams::new(
                            &mut init,
                            &format!("{name}.attn"),
                            c.d_model,
                            c.n_heads,
                            window,
                            c.dropout,
                        )?)
                    }
                };
                let mixer_ln = layer_norm_params(&mut init, flags, &format!("{name}.mix"), c.d_model)?;
                let ff = FeedForwardBlockParams::new(
                    &mut init,
                    &format!("{name}.ff"),
                    c.d_model,
                    c.d_hidden,
                    c.dropout,
                    flags,
                )?;
                blocks.push(Block {
                    mixer,
                    mixer_ln,
                    name,
                    ff,
                });
            }
        }
    }

    // post-norm blocks already end in a norm
    let final_ln = if c.use_layernorm && c.norm_position == NormPosition::Pre {
        Some((
            init.ones("final_ln.gain", &[c.d_model])?,
            init.zeros("final_ln.bias", &[c.d_model])?,
        ))
    } else {
        None
    };
    let (output_table, tie_proj, d_out) = if c.tie_weights {
        let proj = (c.d_model != c.d_emb)
            .then(|| init.weight("output.tie_proj", &[c.d_model, c.d_emb]))
            .transpose()?;
        (None, proj, c.d_emb)
    } else {
        (Some(init.weight("output.table", &[c.vocab_size, c.d_model])?), None, c.d_model)
    };
    let head = if c.adaptive_cutoffs.is_empty() {
        Head::Full
    } else {
        Head::Adaptive(AdaptiveSoftmaxParams::new(
            &mut init,
            "output.adaptive",
            d_out,
            c.vocab_size,
            &c.adaptive_cutoffs,
        )?)
    };
    Ok(Model {
        config: config.clone(),
        params: store,
        embedding,
        output_table,
        tie_proj,
        stem,
        ff_stack,
        blocks,
        final_ln,
        head,
    })
}

/// Fixed sinusoidal position table `[seq_len × d]`.
pub fn sinusoidal_positions(seq_len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; seq_len * d];
    for pos in 0..seq_len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Total scalar parameters; a tied table is counted once.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Final hidden states `[N × d]` and the output table for
    /// `ids` laid out as `N / seq_len` sequences of `seq_len` tokens.
    pub fn hidden(&self, tape: &mut Tape<T>, ids: &[usize], seq_len: usize, ctx: &ForwardCtx) -> Result<(Var, Var)> {
        self.hidden_with(&self.params, tape, ids, seq_len, ctx)
    }

    /// As [`Model::hidden`], reading weights from `store` (which must have
    /// this model's layout).
    fn hidden_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        ids: &[usize],
        seq_len: usize,
        ctx: &ForwardCtx,
    ) -> Result<(Var, Var)> {
        if ids.is_empty() || seq_len == 0 || !ids.len().is_multiple_of(seq_len) {
            return Err(Error::shape("model_forward", &[ids.len()], &[seq_len]));
        }
        let c = &self.config;
        let table = tape.param(store, self.embedding);
        let mut x = tape.gather_rows(table, ids)?;
        if let Some(stem) = &self.stem {
            x = concat_layer_forward(tape, store, x, seq_len, stem)?;
            let mut rng = ctx.rng("stem.drop");
            x = tape.dropout(x, c.dropout, ctx.mode, &mut rng)?;
            for ff in &self.ff_stack {
                x = feed_forward_block(tape, store, x, ff, ctx)?;
            }
        } else {
            // unscaled, the 0.02-std embeddings are drowned by unit-amplitude positions
            x = tape.scale(x, T::of((c.d_model as f64).sqrt()));
            let pe = sinusoidal_positions(seq_len, c.d_model);
            let tiled: Vec<f64> = pe.iter().copied().cycle().take(ids.len() * c.d_model).collect();
            let pe = tape.constant(Tensor::from_f64(&[ids.len(), c.d_model], &tiled)?);
            x = tape.add(x, pe)?;
            let mut rng = ctx.rng("input.drop");
            x = tape.dropout(x, c.dropout, ctx.mode, &mut rng)?;
            let flags = ResidualFlags {
                use_residual: c.use_residual,
                use_layernorm: c.use_layernorm,
                norm_position: c.norm_position,
            };
            for block in &self.blocks {
                let name = format!("{}.mix", block.name);
                x = residual_sublayer(tape, store, x, block.mixer_ln, flags, c.dropout, ctx, &name, |tape, h| {
                    match &block.mixer {
                        Mixer::Attention(p) => causal_self_attention(tape, store, h, seq_len, p, ctx),
                        Mixer::Concat(p) => concat_layer_forward(tape, store, h, seq_len, p),
                    }
                })?;
                x = feed_forward_block(tape, store, x, &block.ff, ctx)?;
            }
        }
        if let Some((g, b)) = self.final_ln {
            let g = tape.param(store, g);
            let b = tape.param(store, b);
            x = tape.layer_norm(x, g, b, T::of(LAYER_NORM_EPS))?;
        }
        if let Some(p) = self.tie_proj {
            let p = tape.param(store, p);
            x = tape.matmul(x, p)?;
        }
        let out_table = match self.output_table {
            Some(id) => tape.param(store, id),
            None => table,
        };
        Ok((x, out_table))
    }

    /// Row `r` scores the token following `ids[r]`: logits for a full
    /// softmax head, log-probabilities for an adaptive head.
    pub fn forward_logits(&self, tape: &mut Tape<T>, ids: &[usize], seq_len: usize, ctx: &ForwardCtx) -> Result<Var> {
        let (h, table) = self.hidden(tape, ids, seq_len, ctx)?;
        match &self.head {
            Head::Full => tied_output_logits(tape, h, table, None),
            Head::Adaptive(p) => adaptive_log_prob_table(tape, &self.params, h, table, p),
        }
    }

    /// `[N × V]` normalized log-probabilities.
    pub fn log_probs(&self, tape: &mut Tape<T>, ids: &[usize], seq_len: usize, ctx: &ForwardCtx) -> Result<Var> {
        let out = self.forward_logits(tape, ids, seq_len, ctx)?;
        Ok(match self.head {
            Head::Full => tape.log_softmax(out),
            Head::Adaptive(_) => out,
        })
    }

    /// Mean next-token negative log-likelihood over every position.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        inputs: &[usize],
        targets: &[usize],
        seq_len: usize,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        self.loss_with(&self.params, tape, inputs, targets, seq_len, ctx)
    }

    /// As [`Model::loss`] with weights taken from `store`; used by gradient
    /// checks that perturb a copy of the parameters.
    pub fn loss_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        inputs: &[usize],
        targets: &[usize],
        seq_len: usize,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        if inputs.len() != targets.len() {
            return Err(Error::shape("model_loss", &[inputs.len()], &[targets.len()]));
        }
        if store.len() != self.params.len() {
            return Err(Error::shape("model_loss", &[store.len()], &[self.params.len()]));
        }
        let (h, table) = self.hidden_with(store, tape, inputs, seq_len, ctx)?;
        match &self.head {
            Head::Full => {
                let logits = tied_output_logits(tape, h, table, None)?;
                tape.softmax_cross_entropy(logits, targets)
            }
            Head::Adaptive(p) => adaptive_nll(tape, store, h, table, p, targets),
        }
    }
}
