use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::output::validate_cutoffs;
use super::*;
use crate::autograd::{grad_check, ParamStore, Tape, Tensor, Var, DEFAULT_EPS};
use crate::error::Error;
use crate::rng::ForwardCtx;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Re-draws every parameter uniformly in `[-scale, scale]` so gradient
/// checks are not dominated by near-zero gradients.
fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

#[test]
fn concat_window_examples() {
    let mut tape = Tape::<f64>::new();
    let pad = tape.leaf(Tensor::from_f64(&[2], &[9., 9.]).unwrap());
    let x = tape.leaf(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
    let out = concat_window(&mut tape, x, 3, pad, 1).unwrap();
    assert_eq!(tape.data(out), &[9., 9., 9., 9., 9., 9.]);

    let (a, b, c) = ([1., 1.], [2., 2.], [3., 3.]);
    let x = tape.leaf(Tensor::from_f64(&[3, 2], &[a, b, c].concat()).unwrap());
    let out = concat_window(&mut tape, x, 2, pad, 3).unwrap();
    let p = [9., 9.];
    let expected = [p, p, p, a, a, b].concat();
    assert_eq!(tape.data(out), &expected[..]);
}

#[test]
fn concat_window_rows_ignore_later_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = random(&mut rng, &[8, 4]);
    let pad = random(&mut rng, &[4]);
    let rows = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = tape.leaf(pad.clone());
        let out = concat_window(&mut tape, xv, 3, pv, 8).unwrap();
        tape.value(out).clone()
    };
    let reference = rows(&base);
    for j in 0..8 {
        let mut perturbed = base.clone();
        perturbed.data_mut()[j * 4 + 1] += 0.5;
        let out = rows(&perturbed);
        for t in 0..8 {
            if t <= j {
                assert_eq!(out.row(t), reference.row(t), "row {t} changed after perturbing {j}");
            } else if t <= j + 3 {
                assert_ne!(out.row(t), reference.row(t), "row {t} should see position {j}");
            } else {
                assert_eq!(out.row(t), reference.row(t));
            }
        }
    }
}

fn global_params(mode: GlobalMode, n: usize, width: usize, store: &mut ParamStore<f64>) -> GlobalKernelParams {
    let mut init = Init { store, seed: 3 };
    GlobalKernelParams::new(&mut init, "g", mode, n, width).unwrap()
}

#[test]
fn global_context_examples() {
    let mut store = ParamStore::new();
    let avg = global_params(GlobalMode::UniformAverage, 0, 1, &mut store);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_f64(&[4, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
    let out = global_context_embed(&mut tape, &store, x, 1, 4, &avg, false).unwrap();
    let v = tape.value(out);
    // rows 0 and 1 have an empty distant region
    assert_eq!(v.row(0), &[0., 0.]);
    assert_eq!(v.row(1), &[0., 0.]);
    assert_eq!(v.row(2), &[1., 2.]);
    assert_eq!(v.row(3), &[2., 3.]);

    let learned = global_params(GlobalMode::LearnedKernel, 5, 3, &mut store);
    let out = global_context_embed(&mut tape, &store, x, 3, 4, &learned, false).unwrap();
    assert_eq!(tape.shape(out), &[4, 10]);
    for t in 0..=3 {
        assert!(tape.value(out).row(t).iter().all(|&v| v == 0.0), "t <= k gives zeros");
    }

    let disabled = global_params(GlobalMode::Disabled, 0, 1, &mut store);
    assert!(global_context_embed(&mut tape, &store, x, 1, 4, &disabled, false).is_err());
}

#[test]
fn unit_width_kernel_reduces_to_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let mut store = ParamStore::new();
        let avg = global_params(GlobalMode::UniformAverage, 0, 1, &mut store);
        let learned = global_params(GlobalMode::LearnedKernel, 1, 1, &mut store);
        store.get_mut(learned.kernels.unwrap()).tensor.data_mut()[0] = 1.0;
        let x = random(&mut rng, &[2 * 9, 5]);
        let k = 1 + trial % 4;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let a = global_context_embed(&mut tape, &store, xv, k, 9, &avg, trial % 2 == 0).unwrap();
        let b = global_context_embed(&mut tape, &store, xv, k, 9, &learned, trial % 2 == 0).unwrap();
        for (p, q) in tape.data(a).iter().zip(tape.data(b)) {
            assert!((p - q).abs() < 1e-6);
        }
    }
}

/// Explicit convolution: kernel `j` slides over the zero-padded region and
/// its outputs are averaged.
fn brute_force_kernel(x: &Tensor<f64>, w: &[f64], n: usize, width: usize, k: usize, t: usize) -> Vec<f64> {
    let d = x.shape()[1];
    let region = t.saturating_sub(k);
    let mut out = vec![0.0; n * d];
    if region == 0 {
        return out;
    }
    for j in 0..n {
        for p in 0..region {
            for i in 0..width {
                let pos = p as isize - (width as isize - 1) + i as isize;
                if pos < 0 {
                    continue;
                }
                for c in 0..d {
                    out[j * d + c] += w[j * width + i] * x.row(pos as usize)[c];
                }
            }
        }
        for c in 0..d {
            out[j * d + c] /= region as f64;
        }
    }
    out
}

#[test]
fn learned_kernel_matches_explicit_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let learned = global_params(GlobalMode::LearnedKernel, 3, 4, &mut store);
    randomize(&mut store, 5, 1.0);
    let w = store.tensor(learned.kernels.unwrap()).data().to_vec();
    let x = random(&mut rng, &[12, 3]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = global_context_embed(&mut tape, &store, xv, 2, 12, &learned, false).unwrap();
    for t in 0..12 {
        let expected = brute_force_kernel(&x, &w, 3, 4, 2, t);
        for (a, b) in tape.value(out).row(t).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
        }
    }
}

fn concat_layer(store: &mut ParamStore<f64>, k: usize, d: usize, global: Option<(GlobalMode, usize, usize)>, act: Activation) -> ConcatLayerParams {
    let mut init = Init { store, seed: 11 };
    let global = global.map(|(m, n, w)| GlobalKernelParams::new(&mut init, "c.global", m, n, w).unwrap());
    ConcatLayerParams::new(&mut init, "c", k, d, 6, d, act, global, false).unwrap()
}

#[test]
fn concat_layer_zero_weights_give_zero() {
    let mut store = ParamStore::new();
    let p = concat_layer(&mut store, 2, 3, None, Activation::Tanh);
    store.get_mut(p.w_concat).tensor.data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&mut rng, &[5, 3]));
    let out = concat_layer_forward(&mut tape, &store, x, 5, &p).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn concat_layer_identity_composition_returns_previous_embedding() {
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, seed: 1 };
    let p = ConcatLayerParams::new(&mut init, "c", 1, 3, 3, 3, Activation::Relu, None, false).unwrap();
    for id in [p.w_concat, p.proj] {
        let w = store.get_mut(id).tensor.data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn(&[6, 3], |_| rng.random_range(0.0..1.0));
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = concat_layer_forward(&mut tape, &store, xv, 6, &p).unwrap();
    for t in 1..6 {
        assert_eq!(tape.value(out).row(t), x.row(t - 1));
    }
}

#[test]
fn concat_layer_shape_mismatch() {
    let mut store = ParamStore::new();
    let p = concat_layer(&mut store, 2, 3, None, Activation::Relu);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4, 5]));
    assert!(matches!(concat_layer_forward(&mut tape, &store, x, 4, &p), Err(Error::Shape { .. })));
}

#[test]
fn concat_layer_passes_grad_check() {
    let configs = [
        None,
        Some((GlobalMode::UniformAverage, 0, 1)),
        Some((GlobalMode::LearnedKernel, 2, 3)),
    ];
    for (i, global) in configs.into_iter().enumerate() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut store = ParamStore::new();
            let p = concat_layer(&mut store, 2, 3, global, act);
            let x_id = store.add("x", Tensor::zeros(&[2 * 7, 3])).unwrap();
            randomize(&mut store, 20 + i as u64, 1.0);
            let report = grad_check(
                |tape, s| {
                    let x = tape.param(s, x_id);
                    let out = concat_layer_forward(tape, s, x, 7, &p)?;
                    Ok(weighted_sum(tape, out, 3))
                },
                &mut store,
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{global:?} {act:?}: {report:?}");
        }
    }
}

#[test]
fn concat_layer_locality_is_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for global in [None, Some((GlobalMode::UniformAverage, 0, 1)), Some((GlobalMode::LearnedKernel, 2, 2))] {
        let mut store = ParamStore::new();
        let p = concat_layer(&mut store, 3, 2, global, Activation::Tanh);
        let base = random(&mut rng, &[8, 2]);
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = concat_layer_forward(&mut tape, &store, xv, 8, &p).unwrap();
            tape.value(out).clone()
        };
        let reference = run(&base);
        for j in 0..8 {
            let mut x = base.clone();
            x.data_mut()[j * 2] += 0.25;
            let out = run(&x);
            for t in 0..8 {
                let in_window = j < t && j + 3 >= t;
                let distant = j + 3 < t;
                let may_change = in_window || (distant && global.is_some());
                if !may_change {
                    assert_eq!(out.row(t), reference.row(t), "{global:?}: t={t} j={j}");
                } else {
                    assert_ne!(out.row(t), reference.row(t), "{global:?}: t={t} j={j}");
                }
            }
        }
    }
}

fn attention_layer(store: &mut ParamStore<f64>, d: usize, heads: usize, window: Option<usize>) -> AttentionParams {
    let mut init = Init { store, seed: 9 };
    AttentionParams::new(&mut init, "attn", d, heads, window, 0.0).unwrap()
}

/// Attention computed from an explicit `T×T` mask matrix.
fn brute_force_attention(store: &ParamStore<f64>, p: &AttentionParams, x: &Tensor<f64>, window: Option<usize>) -> Vec<f64> {
    let t_len = x.shape()[0];
    let d = p.d_model;
    let dh = d / p.n_heads;
    let project = |w: &Tensor<f64>| {
        let mut out = vec![0.0; t_len * d];
        for i in 0..t_len {
            for c in 0..d {
                out[i * d + c] = (0..d).map(|m| x.row(i)[m] * w.data()[m * d + c]).sum();
            }
        }
        out
    };
    let (q, k, v) = (project(store.tensor(p.w_q)), project(store.tensor(p.w_k)), project(store.tensor(p.w_v)));
    let mut mask = vec![vec![false; t_len]; t_len];
    for (i, row) in mask.iter_mut().enumerate() {
        for (j, allowed) in row.iter_mut().enumerate() {
            *allowed = j <= i && window.is_none_or(|w| i <= j + w);
        }
    }
    let mut ctx = vec![0.0; t_len * d];
    for h in 0..p.n_heads {
        for i in 0..t_len {
            let scores: Vec<f64> = (0..t_len)
                .map(|j| {
                    if mask[i][j] {
                        (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..t_len {
                for c in 0..dh {
                    ctx[i * d + h * dh + c] += exps[j] / z * v[j * d + h * dh + c];
                }
            }
        }
    }
    let wo = store.tensor(p.w_o);
    let mut out = vec![0.0; t_len * d];
    for i in 0..t_len {
        for c in 0..d {
            out[i * d + c] = (0..d).map(|m| ctx[i * d + m] * wo.data()[m * d + c]).sum();
        }
    }
    out
}

#[test]
fn windowed_attention_matches_brute_force_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t_len in 1..=8 {
        for w in 1..=8 {
            let mut store = ParamStore::new();
            let p = attention_layer(&mut store, 8, 2, Some(w));
            randomize(&mut store, (t_len * 10 + w) as u64, 0.8);
            let x = random(&mut rng, &[t_len, 8]);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = causal_self_attention(&mut tape, &store, xv, t_len, &p, &ForwardCtx::eval()).unwrap();
            let expected = brute_force_attention(&store, &p, &x, Some(w));
            for (a, b) in tape.data(out).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-6, "T={t_len} w={w}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn single_position_attention_is_value_projection() {
    let mut store = ParamStore::new();
    let p = attention_layer(&mut store, 4, 2, None);
    randomize(&mut store, 1, 1.0);
    let x = Tensor::from_f64(&[1, 4], &[0.3, -0.2, 0.5, 1.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = causal_self_attention(&mut tape, &store, xv, 1, &p, &ForwardCtx::eval()).unwrap();
    let wv = tape.param(&store, p.w_v);
    let wo = tape.param(&store, p.w_o);
    let v = tape.matmul(xv, wv).unwrap();
    let expected = tape.matmul(v, wo).unwrap();
    for (a, b) in tape.data(out).iter().zip(tape.data(expected)) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn attention_support_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random(&mut rng, &[5, 4]);
    let k = random(&mut rng, &[5, 4]);
    let probs = crate::autograd::attention_probs(q.data(), k.data(), 5, 4, 2, 5, Some(1));
    for h in 0..2 {
        for i in 0..5 {
            let row = &probs[h * 25 + i * 5..h * 25 + (i + 1) * 5];
            let support: Vec<usize> = (0..5).filter(|&j| row[j] > 0.0).collect();
            let expected: Vec<usize> = (i.saturating_sub(1)..=i).collect();
            assert_eq!(support, expected);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let full = crate::autograd::attention_probs(q.data(), k.data(), 5, 4, 2, 5, None);
    for r in full.chunks(5) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_rejects_zero_window() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init { store: &mut store, seed: 0 };
    assert!(matches!(AttentionParams::new(&mut init, "a", 4, 2, Some(0), 0.0), Err(Error::Config(_))));
    let mut p = attention_layer(&mut store, 4, 2, None);
    p.window = Some(0);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[3, 4]));
    assert!(matches!(
        causal_self_attention(&mut tape, &store, x, 3, &p, &ForwardCtx::eval()),
        Err(Error::Config(_))
    ));
}

#[test]
fn attention_is_causal_and_window_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for window in [None, Some(1), Some(2)] {
        let mut store = ParamStore::new();
        let p = attention_layer(&mut store, 6, 3, window);
        randomize(&mut store, 2, 0.8);
        let base = random(&mut rng, &[8, 6]);
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = causal_self_attention(&mut tape, &store, xv, 8, &p, &ForwardCtx::eval()).unwrap();
            tape.value(out).clone()
        };
        let reference = run(&base);
        for j in 0..8 {
            let mut x = base.clone();
            x.data_mut()[j * 6 + 2] += 0.3;
            let out = run(&x);
            for t in 0..8 {
                let outside_window = window.is_some_and(|w| j + w < t);
                if j > t || outside_window {
                    assert_eq!(out.row(t), reference.row(t), "window {window:?}: t={t} j={j}");
                }
            }
        }
    }
}

#[test]
fn attention_passes_grad_check() {
    for (window, dropout) in [(None, 0.0), (Some(2), 0.0), (Some(1), 0.3)] {
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed: 13 };
        let p = AttentionParams::new(&mut init, "attn", 6, 2, window, dropout).unwrap();
        let x_id = store.add("x", Tensor::zeros(&[2 * 5, 6])).unwrap();
        randomize(&mut store, 14, 0.8);
        // dropout masks are a pure function of (seed, step, name)
        let ctx = ForwardCtx::train(5, 1);
        let report = grad_check(
            |tape, s| {
                let x = tape.param(s, x_id);
                let out = causal_self_attention(tape, s, x, 5, &p, &ctx)?;
                Ok(weighted_sum(tape, out, 4))
            },
            &mut store,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{window:?}: {report:?}");
    }
}

fn ff_block(store: &mut ParamStore<f64>, flags: ResidualFlags) -> FeedForwardBlockParams {
    let mut init = Init { store, seed: 15 };
    FeedForwardBlockParams::new(&mut init, "ff", 4, 8, 0.1, flags).unwrap()
}

#[test]
fn feed_forward_zero_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, &[3, 4]);
    for use_residual in [true, false] {
        let mut store = ParamStore::new();
        let flags = ResidualFlags {
            use_residual,
            ..ResidualFlags::default()
        };
        let p = ff_block(&mut store, flags);
        store.get_mut(p.w1).tensor.data_mut().fill(0.0);
        store.get_mut(p.w2).tensor.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = feed_forward_block(&mut tape, &store, xv, &p, &ForwardCtx::eval()).unwrap();
        if use_residual {
            assert_eq!(tape.data(y), x.data());
        } else {
            assert!(tape.data(y).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn feed_forward_passes_grad_check_for_all_flag_combinations() {
    for use_residual in [true, false] {
        for use_layernorm in [true, false] {
            for norm_position in [NormPosition::Pre, NormPosition::Post] {
                let mut store = ParamStore::new();
                let flags = ResidualFlags {
                    use_residual,
                    use_layernorm,
                    norm_position,
                };
                let p = ff_block(&mut store, flags);
                let x_id = store.add("x", Tensor::zeros(&[5, 4])).unwrap();
                randomize(&mut store, 17, 1.0);
                let ctx = ForwardCtx::train(1, 2);
                let report = grad_check(
                    |tape, s| {
                        let x = tape.param(s, x_id);
                        let y = feed_forward_block(tape, s, x, &p, &ctx)?;
                        Ok(weighted_sum(tape, y, 5))
                    },
                    &mut store,
                    DEFAULT_EPS,
                )
                .unwrap();
                assert!(report.max_rel_err < 1e-4, "{flags:?}: {report:?}");
            }
        }
    }
}

#[test]
fn tied_logits_are_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let table = random(&mut rng, &[5, 3]);
    let mut tape = Tape::new();
    let tv = tape.leaf(table.clone());
    let h = tape.gather_rows(tv, &[2]).unwrap();
    let logits = tied_output_logits(&mut tape, h, tv, None).unwrap();
    let norm_sq: f64 = table.row(2).iter().map(|v| v * v).sum();
    assert!((tape.data(logits)[2] - norm_sq).abs() < 1e-15);

    let wide = tape.leaf(random(&mut rng, &[2, 4]));
    assert!(matches!(tied_output_logits(&mut tape, wide, tv, None), Err(Error::Config(_))));
    let proj = tape.leaf(random(&mut rng, &[4, 3]));
    let logits = tied_output_logits(&mut tape, wide, tv, Some(proj)).unwrap();
    assert_eq!(tape.shape(logits), &[2, 5]);
}

#[test]
fn tied_table_gradient_is_sum_of_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let table = random(&mut rng, &[6, 4]);
    let mixer = random(&mut rng, &[4, 4]);
    let ids = [1, 4, 4, 0, 2];
    let targets = [4, 4, 0, 2, 5];

    let forward = |tape: &mut Tape<f64>, input_table: Var, output_table: Var| {
        let m = tape.constant(mixer.clone());
        let e = tape.gather_rows(input_table, &ids).unwrap();
        let h = tape.matmul(e, m).unwrap();
        let h = tape.tanh(h);
        let logits = tied_output_logits(tape, h, output_table, None).unwrap();
        tape.softmax_cross_entropy(logits, &targets).unwrap()
    };

    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let shared = tape.leaf(table.clone().with_requires_grad(true));
    let loss = forward(&mut tape, shared, shared);
    tape.backward(loss, &mut store).unwrap();
    let tied = tape.grad(shared).unwrap().to_vec();

    let mut tape = Tape::new();
    let input = tape.leaf(table.clone().with_requires_grad(true));
    let output = tape.leaf(table.clone().with_requires_grad(true));
    let loss = forward(&mut tape, input, output);
    tape.backward(loss, &mut store).unwrap();
    let (gi, go) = (tape.grad(input).unwrap(), tape.grad(output).unwrap());
    for i in 0..tied.len() {
        assert!((tied[i] - (gi[i] + go[i])).abs() < 1e-6);
    }
}

fn adaptive(store: &mut ParamStore<f64>, d: usize, vocab: usize, cutoffs: &[usize]) -> AdaptiveSoftmaxParams {
    let mut init = Init { store, seed: 21 };
    AdaptiveSoftmaxParams::new(&mut init, "out", d, vocab, cutoffs).unwrap()
}

#[test]
fn adaptive_with_no_cutoffs_is_full_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let p = adaptive(&mut store, 4, 7, &[]);
    let table = random(&mut rng, &[7, 4]);
    let h = random(&mut rng, &[5, 4]);
    let mut tape = Tape::new();
    let tv = tape.leaf(table);
    let hv = tape.leaf(h);
    let lp = adaptive_log_prob_table(&mut tape, &store, hv, tv, &p).unwrap();
    let logits = tied_output_logits(&mut tape, hv, tv, None).unwrap();
    let full = tape.log_softmax(logits);
    assert_eq!(tape.data(lp), tape.data(full));
}

#[test]
fn adaptive_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (vocab, cutoffs) in [(6, vec![3]), (30, vec![10, 20])] {
        let mut store = ParamStore::new();
        let p = adaptive(&mut store, 8, vocab, &cutoffs);
        randomize(&mut store, 24, 1.0);
        let mut tape = Tape::new();
        let tv = tape.leaf(random(&mut rng, &[vocab, 8]));
        let hv = tape.leaf(random(&mut rng, &[4, 8]));
        let lp = adaptive_log_prob_table(&mut tape, &store, hv, tv, &p).unwrap();
        for r in 0..4 {
            let total: f64 = tape.value(lp).row(r).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
        // per-target path agrees with the table
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..vocab)).collect();
        let picked = adaptive_target_log_probs(&mut tape, &store, hv, tv, &p, &targets).unwrap();
        for (r, &y) in targets.iter().enumerate() {
            let a = tape.data(picked)[r];
            let b = tape.value(lp).row(r)[y];
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn adaptive_head_target_uses_head_softmax_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    let p = adaptive(&mut store, 4, 6, &[3]);
    randomize(&mut store, 26, 1.0);
    let table = random(&mut rng, &[6, 4]);
    let h = random(&mut rng, &[1, 4]);
    let mut tape = Tape::new();
    let tv = tape.leaf(table.clone());
    let hv = tape.leaf(h.clone());
    let picked = adaptive_target_log_probs(&mut tape, &store, hv, tv, &p, &[1]).unwrap();

    let cw = store.tensor(p.cluster_weights.unwrap());
    let mut head: Vec<f64> = (0..3).map(|w| (0..4).map(|c| h.data()[c] * table.row(w)[c]).sum()).collect();
    head.push((0..4).map(|c| h.data()[c] * cw.data()[c]).sum());
    crate::autograd::log_softmax_in_place(&mut head);
    assert!((tape.data(picked)[0] - head[1]).abs() < 1e-15);
}

#[test]
fn adaptive_cutoff_validation() {
    assert!(validate_cutoffs(&[3], 6).is_ok());
    assert!(matches!(validate_cutoffs(&[6], 6), Err(Error::Config(_))));
    assert!(matches!(validate_cutoffs(&[4, 4], 6), Err(Error::Config(_))));
    assert!(matches!(validate_cutoffs(&[0], 6), Err(Error::Config(_))));
}

#[test]
fn adaptive_nll_passes_grad_check() {
    let mut store = ParamStore::new();
    let p = adaptive(&mut store, 8, 12, &[4, 8]);
    let table = store.add("table", Tensor::zeros(&[12, 8])).unwrap();
    let h_id = store.add("h", Tensor::zeros(&[6, 8])).unwrap();
    randomize(&mut store, 27, 1.0);
    let targets = [0, 5, 9, 11, 3, 6];
    let report = grad_check(
        |tape, s| {
            let tv = tape.param(s, table);
            let hv = tape.param(s, h_id);
            adaptive_nll(tape, s, hv, tv, &p, &targets)
        },
        &mut store,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
