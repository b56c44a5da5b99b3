use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::rng::Mode;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Central-difference oracle over leaf inputs, independent of `grad_check`.
fn fd_max_rel_err(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let run = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = run(inputs);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[which]).map(|g| g.to_vec()).unwrap_or(vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            let mut shifted = inputs.to_vec();
            shifted[which].data_mut()[i] += eps;
            let (t, _, l) = run(&shifted);
            let plus = t.data(l)[0];
            shifted[which].data_mut()[i] -= 2.0 * eps;
            let (t, _, l) = run(&shifted);
            let minus = t.data(l)[0];
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum with fixed random weights, so the loss is not symmetric in
/// its inputs.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let eye = tape.leaf(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let c = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.data(c), &[1., 2., 3., 4.]);

    let x = tape.leaf(Tensor::scalar(2.0).reshape(&[1, 1]).unwrap());
    let y = tape.leaf(Tensor::scalar(3.0).reshape(&[1, 1]).unwrap());
    let z = tape.matmul(x, y).unwrap();
    assert_eq!(tape.data(z), &[6.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let err = fd_max_rel_err(&[a, b], &|t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            t.sum(c)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn matmul_nt_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..100 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[5, 4]);
        let err = fd_max_rel_err(&[a, b], &move |t, v| {
            let c = t.matmul_nt(v[0], v[1]).unwrap();
            weighted_sum(t, c, seed)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[1, 3], &[5., 5., 5.]).unwrap());
    let g = tape.leaf(Tensor::filled(&[3], 1.0));
    let b = tape.leaf(Tensor::zeros(&[3]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.data(y), &[0., 0., 0.]);

    let x = tape.leaf(Tensor::from_f64(&[1, 2], &[1., 3.]).unwrap());
    let g = tape.leaf(Tensor::filled(&[2], 1.0));
    let b = tape.leaf(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
    assert_eq!(tape.data(y), &[-1., 1.]);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..100 {
        let x = random(&mut rng, &[4, 8]);
        let g = random(&mut rng, &[8]);
        let b = random(&mut rng, &[8]);
        let err = fd_max_rel_err(&[x, g, b], &move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[1, 4]));
    let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
    assert!((tape.data(loss)[0] - 4f64.ln()).abs() < 1e-15);

    let logits = tape.leaf(Tensor::from_f64(&[1, 4], &[0., 50., 0., 0.]).unwrap());
    let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
    assert!(tape.data(loss)[0] < 1e-20);

    let err = tape.softmax_cross_entropy(logits, &[4]).unwrap_err();
    assert!(matches!(err, Error::Index { index: 4, bound: 4, .. }));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let logits = random(&mut rng, &[2, 5]);
        let targets = [rng.random_range(0..5), rng.random_range(0..5)];
        let err = fd_max_rel_err(&[logits], &move |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap());
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot_over_n() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 4]).with_requires_grad(true));
    let loss = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    let g = tape.grad(logits).unwrap();
    let expected = [-0.375, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, -0.375];
    for (a, b) in g.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_and_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..100 {
        let x = random(&mut rng, &[3, 6]).into_data().iter().map(|v| v * 2.0).collect::<Vec<_>>();
        let x = Tensor::new(&[3, 6], x).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone());
        let s = tape.softmax(v);
        assert_eq!(tape.shape(s), &[3, 6]);
        for r in 0..3 {
            let total: f64 = tape.value(s).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let err = fd_max_rel_err(std::slice::from_ref(&x), &move |t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-6, "softmax rel err {err}");
        let err = fd_max_rel_err(&[x], &move |t, v| {
            let y = t.log_softmax(v[0]);
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-6, "log_softmax rel err {err}");
    }

    let x: Tensor<f32> = Tensor::from_fn(&[4, 50], |i| (i as f32 * 0.37).sin() * 8.0);
    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(x);
    let s = tape.softmax(v);
    for r in 0..4 {
        let total: f32 = tape.value(s).row(r).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn embedding_lookup_examples() {
    let mut tape = Tape::<f64>::new();
    let table = tape.leaf(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap().with_requires_grad(true));
    let out = tape.gather_rows(table, &[1, 0, 1]).unwrap();
    assert_eq!(tape.data(out), &[3., 4., 1., 2., 3., 4.]);
    assert!(matches!(tape.gather_rows(table, &[2]), Err(Error::Index { index: 2, .. })));

    let picked = tape.gather_rows(table, &[0, 0]).unwrap();
    let upstream = tape.constant(Tensor::from_f64(&[2, 2], &[1., 2., 10., 20.]).unwrap());
    let prod = tape.mul(picked, upstream).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    assert_eq!(tape.grad(table).unwrap(), &[11., 22., 0., 0.]);
}

#[test]
fn embedding_lookup_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..100 {
        let table = random(&mut rng, &[5, 3]);
        let ids: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
        let err = fd_max_rel_err(&[table], &move |t, v| {
            let y = t.gather_rows(v[0], &ids).unwrap();
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[-1., 0., 2.]).unwrap().with_requires_grad(true));
    let r = tape.relu(x);
    assert_eq!(tape.data(r), &[0., 0., 2.]);
    let loss = tape.sum(r);
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0., 0., 1.], "relu subgradient at 0 is 0");

    let z = tape.leaf(Tensor::scalar(0.0));
    let t = tape.tanh(z);
    assert_eq!(tape.data(t), &[0.]);

    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(tape.mul(a, b), Err(Error::Shape { .. })));
    let row = tape.leaf(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
    let s = tape.add(a, row).unwrap();
    assert_eq!(tape.data(s), &[1., 2., 3., 1., 2., 3.]);
    let sc = tape.scale(s, 2.0);
    assert_eq!(tape.data(sc), &[2., 4., 6., 2., 4., 6.]);
}

#[test]
fn tanh_derivative_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let x = random(&mut rng, &[6]);
        let err = fd_max_rel_err(&[x], &|t, v| {
            let y = t.tanh(v[0]);
            t.sum(y)
        });
        assert!(err < 1e-7, "rel err {err}");
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..100 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4]);
        let c = random(&mut rng, &[3, 4]);
        let err = fd_max_rel_err(&[a, b, c], &move |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let m = t.mul(s, v[2]).unwrap();
            let r = t.relu(m);
            let sc = t.scale(r, 1.7);
            weighted_sum(t, sc, seed)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn dropout_contract() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[100], |i| i as f64 * 0.1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = tape.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.data(y), tape.data(x));
    let y = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.data(y), tape.data(x));
    assert!(matches!(tape.dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));

    let ones = tape.leaf(Tensor::filled(&[1_000_000], 1.0));
    let y = tape.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
    let mean = tape.data(y).iter().sum::<f64>() / 1e6;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    assert!(tape.data(y).iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_is_reproducible_from_seed() {
    let draw = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::filled(&[64], 1.0));
        let mut rng = crate::rng::stream(3, 4, "layers.0.drop");
        let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
        tape.data(y).to_vec()
    };
    assert_eq!(draw(), draw());
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap().with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let mut store = ParamStore::new();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 4., 6.]);

    tape.backward(loss, &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4., 8., 12.], "second backward accumulates");

    assert!(matches!(tape.backward(sq, &mut store), Err(Error::Shape { .. })));

    tape.clear();
    assert_eq!(tape.len(), 0);

    let x = tape.leaf(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap().with_requires_grad(true));
    let c = tape.constant(Tensor::scalar(5.0));
    let zero = tape.leaf(Tensor::zeros(&[3]));
    let dep = tape.mul(x, zero).unwrap();
    let s = tape.sum(dep);
    let loss = tape.add(s, c).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0., 0., 0.]);
}

#[test]
fn backward_doubles_parameter_grads_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, &[4, 3])).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[2, 4]));
    let wv = tape.param(&store, w);
    let h = tape.matmul(x, wv).unwrap();
    let r = tape.tanh(h);
    let loss = tape.sum(r);
    tape.backward(loss, &mut store).unwrap();
    let once = store.tensor(w).grad().unwrap().to_vec();
    tape.backward(loss, &mut store).unwrap();
    let twice = store.tensor(w).grad().unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn two_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let x = random(&mut rng, &[3, 5]);
        let w1 = random(&mut rng, &[5, 6]);
        let w2 = random(&mut rng, &[6, 2]);
        let err = fd_max_rel_err(&[x, w1, w2], &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let r = t.relu(h);
            let o = t.matmul(r, v[2]).unwrap();
            t.sum(o)
        });
        assert!(err < 1e-5, "rel err {err}");
    }
}

#[test]
fn concat_and_slice_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..20 {
        let a = random(&mut rng, &[3, 2]);
        let b = random(&mut rng, &[3, 4]);
        let err = fd_max_rel_err(&[a, b], &move |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]).unwrap();
            let s = t.slice_rows(c, 1, 3).unwrap();
            weighted_sum(t, s, seed)
        });
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn pick_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[4]);
    let err = fd_max_rel_err(&[a, b], &|t, v| {
        let p = t.pick_sum(&[2], vec![(0, v[0], 1), (0, v[1], 3), (1, v[0], 5), (1, v[0], 5)]).unwrap();
        let sq = t.mul(p, p).unwrap();
        t.sum(sq)
    });
    assert!(err < 1e-6);
}

#[test]
fn primitives_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[6, 8], |_| rng.random_range(-1.0f32..1.0)));
        let w = tape.leaf(Tensor::from_fn(&[8, 8], |_| rng.random_range(-1.0f32..1.0)));
        let g = tape.leaf(Tensor::filled(&[8], 1.0f32));
        let b = tape.leaf(Tensor::zeros(&[8]));
        let h = tape.matmul(x, w).unwrap();
        let n = tape.layer_norm(h, g, b, 1e-5).unwrap();
        let mut drop_rng = crate::rng::stream(1, 1, "d");
        let d = tape.dropout(n, 0.2, Mode::Train, &mut drop_rng).unwrap();
        let a = tape
            .attention(d, d, d, 2, 3, Some(1), 0.1, Mode::Train, &mut drop_rng)
            .unwrap();
        let l = tape.softmax_cross_entropy(a, &[0, 1, 2, 3, 4, 5]).unwrap();
        tape.data(l).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn grad_check_examples() {
    let mut store = ParamStore::new();
    let theta = store.add("theta", Tensor::scalar(3.0)).unwrap();
    let report = grad_check(
        |t, p| {
            let v = t.param(p, theta);
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &mut store,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
    assert_eq!(report.checked, 1);

    let calls = std::cell::Cell::new(0.0);
    let err = grad_check(
        |t, p| {
            calls.set(calls.get() + 1.0);
            let v = t.param(p, theta);
            let c = t.constant(Tensor::scalar(calls.get()));
            t.add(v, c)
        },
        &mut store,
        DEFAULT_EPS,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Determinism { .. }));
}

#[test]
fn kink_inside_the_step_is_refined_away() {
    // relu'(5e-5) = 1, but the 1e-4 central difference straddles the kink
    // and reads 0.75
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::filled(&[1], 5e-5)).unwrap();
    let report = grad_check(
        |tape, st| {
            let x = tape.param(st, id);
            let y = tape.relu(x);
            Ok(tape.sum(y))
        },
        &mut store,
        MODEL_EPS,
    )
    .unwrap();
    assert_eq!(report.refined, 1);
    assert!(report.max_rel_err < 1e-9, "{report:?}");
}

#[test]
fn a_wrong_gradient_survives_refinement() {
    // x * stop_gradient(x) is seen by the tape as x * c, gradient c, while
    // the true derivative of x^2 is 2x
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::filled(&[1], 0.7)).unwrap();
    let report = grad_check(
        |tape, st| {
            let x = tape.param(st, id);
            let c = tape.constant(Tensor::filled(&[1], st.tensor(id).data()[0]));
            let y = tape.mul(x, c)?;
            Ok(tape.sum(y))
        },
        &mut store,
        DEFAULT_EPS,
    )
    .unwrap();
    assert_eq!(report.refined, 1);
    assert!((report.max_rel_err - 0.5).abs() < 1e-6, "{report:?}");
}
