//! Finite-difference gradient suite over every primitive, every layer type
//! and every model variant, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var, DEFAULT_EPS, MODEL_EPS};
use crate::error::Result;
use crate::layers::{
    adaptive_nll, causal_self_attention, concat_layer_forward, feed_forward_block, tied_output_logits, Activation,
    AdaptiveSoftmaxParams, AttentionParams, ConcatLayerParams, FeedForwardBlockParams, GlobalKernelParams,
    GlobalMode, Init, NormPosition, ResidualFlags,
};
use crate::model::{build_model, Model, ModelConfig, ModelVariant};
use crate::rng::{stream, ForwardCtx, Mode};

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteGroup {
    Primitive,
    Layer,
    Model,
}

impl SuiteGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteGroup::Primitive => "primitive",
            SuiteGroup::Layer => "layer",
            SuiteGroup::Model => "model",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub group: SuiteGroup,
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < GRAD_TOLERANCE
    }
}

/// Toy model dimensions used by the model checks.
pub fn toy_model_config(variant: ModelVariant) -> ModelConfig {
    let mut c = ModelConfig::for_variant(variant);
    c.vocab_size = 50;
    c.d_emb = 16;
    c.d_model = 16;
    c.d_hidden = 32;
    c.d_concat = 32;
    c.n_heads = 2;
    c.k_concat = 3;
    c.n_global_kernels = 2;
    c.global_kernel_width = 3;
    c.l0_window = 2;
    if variant != ModelVariant::NplmOld {
        c.n_layers = 2;
    }
    c
}

/// Re-draws every parameter uniformly in [-0.4, 0.4] (layer-norm gains in
/// [0.5, 1.5]). At the small default init, deep-parameter gradients sit at
/// the finite-difference noise floor.
pub fn spread_parameters(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let gain = p.name.ends_with(".gain");
        for v in p.tensor.data_mut() {
            *v = if gain {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.4..0.4)
            };
        }
    }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Weighted sum with fixed random weights, so the loss is not symmetric in
/// its inputs.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tape.shape(x), |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

struct Suite {
    entries: Vec<SuiteEntry>,
}

impl Suite {
    fn run<F>(&mut self, group: SuiteGroup, name: &str, store: &mut ParamStore<f64>, eps: f64, f: F) -> Result<()>
    where
        F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let report = grad_check(f, store, eps)?;
        self.entries.push(SuiteEntry {
            group,
            name: name.to_string(),
            report,
        });
        Ok(())
    }

    /// Primitive check over random leaves of the given shapes.
    fn primitive<F>(&mut self, name: &str, shapes: &[&[usize]], seed: u64, mut f: F) -> Result<()>
    where
        F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("in{i}"), Tensor::zeros(s)))
            .collect::<Result<_>>()?;
        randomize(&mut store, seed, 1.0);
        self.run(SuiteGroup::Primitive, name, &mut store, DEFAULT_EPS, |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let out = f(tape, &vars)?;
            if tape.value(out).is_scalar() {
                Ok(out)
            } else {
                weighted_sum(tape, out, seed + 1000)
            }
        })
    }
}

fn primitives(s: &mut Suite) -> Result<()> {
    s.primitive("matmul", &[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]))?;
    s.primitive("matmul_nt", &[&[3, 4], &[5, 4]], 2, |t, v| t.matmul_nt(v[0], v[1]))?;
    s.primitive("add", &[&[3, 4], &[3, 4]], 3, |t, v| t.add(v[0], v[1]))?;
    s.primitive("add_broadcast", &[&[3, 4], &[4]], 4, |t, v| t.add(v[0], v[1]))?;
    s.primitive("mul", &[&[3, 4], &[3, 4]], 5, |t, v| t.mul(v[0], v[1]))?;
    s.primitive("mul_broadcast", &[&[3, 4], &[4]], 6, |t, v| t.mul(v[0], v[1]))?;
    s.primitive("scale", &[&[3, 4]], 7, |t, v| Ok(t.scale(v[0], 0.7)))?;
    s.primitive("relu", &[&[3, 4]], 8, |t, v| Ok(t.relu(v[0])))?;
    s.primitive("tanh", &[&[3, 4]], 9, |t, v| Ok(t.tanh(v[0])))?;
    s.primitive("sum", &[&[3, 4]], 10, |t, v| Ok(t.sum(v[0])))?;
    s.primitive("layer_norm", &[&[3, 5], &[5], &[5]], 11, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;
    s.primitive("softmax_cross_entropy", &[&[4, 5]], 12, |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
    })?;
    s.primitive("softmax", &[&[3, 4]], 13, |t, v| Ok(t.softmax(v[0])))?;
    s.primitive("log_softmax", &[&[3, 4]], 14, |t, v| Ok(t.log_softmax(v[0])))?;
    s.primitive("gather_rows", &[&[5, 3]], 15, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]))?;
    s.primitive("dropout", &[&[4, 5]], 16, |t, v| {
        let mut rng = stream(3, 1, "suite.dropout");
        t.dropout(v[0], 0.3, Mode::Train, &mut rng)
    })?;
    s.primitive("concat_cols", &[&[3, 2], &[3, 4]], 17, |t, v| t.concat_cols(&[v[0], v[1]]))?;
    s.primitive("slice_rows", &[&[5, 3]], 18, |t, v| t.slice_rows(v[0], 1, 4))?;
    s.primitive("window_concat", &[&[2 * 6, 3], &[3]], 19, |t, v| t.window_concat(v[0], v[1], 3, 6, 1))?;
    s.primitive("global_context_mean", &[&[2 * 7, 3]], 20, |t, v| t.global_context(v[0], None, 2, 7, 1))?;
    s.primitive("global_context_kernels", &[&[2 * 7, 3], &[2, 3]], 21, |t, v| {
        t.global_context(v[0], Some(v[1]), 2, 7, 1)
    })?;
    for (name, window) in [("attention", None), ("attention_window", Some(2))] {
        s.primitive(name, &[&[2 * 5, 4], &[2 * 5, 4], &[2 * 5, 4]], 22, |t, v| {
            let mut rng = stream(3, 1, "suite.attention");
            t.attention(v[0], v[1], v[2], 2, 5, window, 0.0, Mode::Eval, &mut rng)
        })?;
    }
    s.primitive("pick_sum", &[&[2, 3], &[4]], 23, |t, v| {
        t.pick_sum(&[3], vec![(0, v[0], 1), (0, v[1], 3), (2, v[0], 5), (1, v[1], 0)])
    })?;
    Ok(())
}

fn layers(s: &mut Suite) -> Result<()> {
    let globals = [
        ("none", None),
        ("uniform_average", Some((GlobalMode::UniformAverage, 0, 1))),
        ("learned_kernel", Some((GlobalMode::LearnedKernel, 2, 3))),
    ];
    for (gname, global) in globals {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut store = ParamStore::new();
            let mut init = Init {
                store: &mut store,
                seed: 31,
            };
            let g = global
                .map(|(m, n, w)| GlobalKernelParams::new(&mut init, "c.global", m, n, w))
                .transpose()?;
            let p = ConcatLayerParams::new(&mut init, "c", 2, 3, 6, 3, act, g, false)?;
            let x = store.add("x", Tensor::zeros(&[2 * 7, 3]))?;
            randomize(&mut store, 32, 1.0);
            let name = format!("concat_layer global={gname} activation={}", act.as_str());
            s.run(SuiteGroup::Layer, &name, &mut store, DEFAULT_EPS, |tape, st| {
                let xv = tape.param(st, x);
                let out = concat_layer_forward(tape, st, xv, 7, &p)?;
                weighted_sum(tape, out, 33)
            })?;
        }
    }

    for (window, dropout) in [(None, 0.0), (Some(2), 0.0), (Some(1), 0.3)] {
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed: 34,
        };
        let p = AttentionParams::new(&mut init, "attn", 6, 2, window, dropout)?;
        let x = store.add("x", Tensor::zeros(&[2 * 5, 6]))?;
        randomize(&mut store, 35, 0.8);
        let ctx = ForwardCtx::train(5, 1);
        let name = format!("attention window={window:?} dropout={dropout}");
        s.run(SuiteGroup::Layer, &name, &mut store, DEFAULT_EPS, |tape, st| {
            let xv = tape.param(st, x);
            let out = causal_self_attention(tape, st, xv, 5, &p, &ctx)?;
            weighted_sum(tape, out, 36)
        })?;
    }

    for use_residual in [true, false] {
        for use_layernorm in [true, false] {
            for norm_position in [NormPosition::Pre, NormPosition::Post] {
                let flags = ResidualFlags {
                    use_residual,
                    use_layernorm,
                    norm_position,
                };
                let mut store = ParamStore::new();
                let mut init = Init {
                    store: &mut store,
                    seed: 37,
                };
                let p = FeedForwardBlockParams::new(&mut init, "ff", 4, 8, 0.1, flags)?;
                let x = store.add("x", Tensor::zeros(&[5, 4]))?;
                randomize(&mut store, 38, 1.0);
                let ctx = ForwardCtx::train(1, 2);
                let name = format!(
                    "feed_forward residual={use_residual} layernorm={use_layernorm} norm={}",
                    norm_position.as_str()
                );
                s.run(SuiteGroup::Layer, &name, &mut store, DEFAULT_EPS, |tape, st| {
                    let xv = tape.param(st, x);
                    let out = feed_forward_block(tape, st, xv, &p, &ctx)?;
                    weighted_sum(tape, out, 39)
                })?;
            }
        }
    }

    let mut store = ParamStore::new();
    let h = store.add("h", Tensor::zeros(&[4, 6]))?;
    let table = store.add("table", Tensor::zeros(&[7, 5]))?;
    let proj = store.add("proj", Tensor::zeros(&[6, 5]))?;
    randomize(&mut store, 40, 1.0);
    s.run(SuiteGroup::Layer, "tied_output", &mut store, DEFAULT_EPS, |tape, st| {
        let (hv, tv, pv) = (tape.param(st, h), tape.param(st, table), tape.param(st, proj));
        let logits = tied_output_logits(tape, hv, tv, Some(pv))?;
        tape.softmax_cross_entropy(logits, &[1, 6, 0, 3])
    })?;

    for cutoffs in [&[][..], &[4, 8][..]] {
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed: 41,
        };
        let p = AdaptiveSoftmaxParams::new(&mut init, "out", 8, 12, cutoffs)?;
        let table = store.add("table", Tensor::zeros(&[12, 8]))?;
        let h = store.add("h", Tensor::zeros(&[6, 8]))?;
        randomize(&mut store, 42, 1.0);
        let targets = [0, 5, 9, 11, 3, 6];
        let name = format!("adaptive_softmax cutoffs={cutoffs:?}");
        s.run(SuiteGroup::Layer, &name, &mut store, DEFAULT_EPS, |tape, st| {
            let (tv, hv) = (tape.param(st, table), tape.param(st, h));
            adaptive_nll(tape, st, hv, tv, &p, &targets)
        })?;
    }
    Ok(())
}

/// End-to-end loss gradient of one toy model, sequence length 12.
pub fn model_grad_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut model: Model<f64> = build_model(config, seed)?;
    spread_parameters(&mut model.params, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let ids: Vec<usize> = (0..13).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let (inputs, targets) = (&ids[..12], &ids[1..]);
    let ctx = ForwardCtx::train(seed, 3);
    let shell = model.clone();
    grad_check(
        |tape, store| shell.loss_with(store, tape, inputs, targets, 12, &ctx),
        &mut model.params,
        MODEL_EPS,
    )
}

fn models(s: &mut Suite) -> Result<()> {
    for variant in ModelVariant::ALL {
        for cutoffs in [vec![], vec![10, 30]] {
            let mut c = toy_model_config(variant);
            c.adaptive_cutoffs = cutoffs;
            let report = model_grad_check(&c, 50)?;
            s.entries.push(SuiteEntry {
                group: SuiteGroup::Model,
                name: format!("{variant} adaptive_cutoffs={:?}", c.adaptive_cutoffs),
                report,
            });
        }
    }
    Ok(())
}

/// Runs every check. Errors are structural (a check could not run), not
/// tolerance failures; inspect [`SuiteEntry::passed`] for those.
pub fn gradcheck_suite() -> Result<Vec<SuiteEntry>> {
    let mut s = Suite { entries: Vec::new() };
    primitives(&mut s)?;
    layers(&mut s)?;
    models(&mut s)?;
    Ok(s.entries)
}
