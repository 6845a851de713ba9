use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(Tensor::eye(2));
    let m = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let ones = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let out = tape.matmul(m, ones).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 1]);
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..7 {
                acc += a.at(i, k) * b.at(k, j);
            }
            let got = tape.value(out).at(i, j);
            assert!((got - acc).abs() <= 1e-6 * acc.abs().max(1e-12), "{got} vs {acc}");
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]));
    let s = tape.softmax_rows(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.25; 4]);

    let row = t64(&[1, 4], &[0.3, -1.2, 2.5, 0.0]);
    let shifted = t64(&[1, 4], &[100.3, 98.8, 102.5, 100.0]);
    let a = tape.constant(row);
    let b = tape.constant(shifted);
    let sa = tape.softmax_rows(a).unwrap();
    let sb = tape.softmax_rows(b).unwrap();
    for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
        assert!((x - y).abs() < 1e-7);
    }

    // extended-precision oracle: p0 = 1 / (1 + e^-1000), p1 = e^-1000 / (1 + e^-1000)
    let big = tape.constant(t64(&[1, 2], &[1000.0, 0.0]));
    let s = tape.softmax_rows(big).unwrap();
    let p1 = (-1000.0f64).exp() / (1.0 + (-1000.0f64).exp());
    assert_eq!(tape.value(s).data()[0], 1.0);
    assert!((tape.value(s).data()[1] - p1).abs() < 1e-300);

    let mut t32 = Tape::<f32>::new();
    let big = t32.constant(Tensor::from_f64(&[1, 2], &[1000.0, 0.0]).unwrap());
    let s = t32.softmax_rows(big).unwrap();
    assert_eq!(t32.value(s).data(), &[1.0, 0.0]);
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let x = Tensor::<f32>::uniform(&[3, n], -1000.0, 1000.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v).unwrap();
        for row in tape.value(s).data().chunks(n) {
            let total: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((total - 1.0).abs() <= 1e-6, "{total}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 4], &[5.0; 4]));
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = Tensor::<f64>::randn(&[3, 8], 2.0, &mut rng);
    let x = tape.constant(input.clone());
    let (g8, b8) = (g_of(&mut tape, 8), b_of(&mut tape, 8));
    let y = tape.layer_norm(x, g8, b8, 1e-5).unwrap();
    let out = tape.value(y);
    for i in 0..3 {
        let row = input.row(i);
        // two-pass statistics
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (j, x) in row.iter().enumerate() {
            let want = (x - mean) / (var + 1e-5).sqrt();
            assert!((out.at(i, j) - want).abs() <= 1e-6 * want.abs().max(1e-9));
        }
        let o = out.row(i);
        let m = o.iter().sum::<f64>() / 8.0;
        let v = o.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5);
    }
}

fn g_of(tape: &mut Tape<f64>, d: usize) -> Var {
    tape.constant(Tensor::ones(&[d]))
}

fn b_of(tape: &mut Tape<f64>, d: usize) -> Var {
    tape.constant(Tensor::zeros(&[d]))
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[3.0, 4.0]));
    let y = tape.l2_normalize_rows(x).unwrap();
    assert!((tape.value(y).data()[0] - 0.6).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - 0.8).abs() < 1e-15);

    let z = tape.constant(Tensor::zeros(&[1, 1]));
    let gz = tape.gelu(z).unwrap();
    assert_eq!(tape.value(gz).item(), 0.0);

    let v = tape.constant(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let m = tape.mean(v).unwrap();
    assert_eq!(tape.value(m).item(), 2.5);
    let s = tape.sum(v).unwrap();
    assert_eq!(tape.value(s).item(), 10.0);

    let zero_row = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    assert!(matches!(
        tape.l2_normalize_rows(zero_row),
        Err(Error::Degenerate(_))
    ));

    let a = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn nan_input_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax_rows(x), Err(Error::NonFinite(_))));
    let big = tape.constant(t64(&[1, 1], &[800.0]));
    assert!(matches!(tape.exp(big), Err(Error::NonFinite(_))));
}

#[test]
fn backward_bilinear_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a_val = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let b_val = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let a = tape.leaf(a_val, true);
    let b = tape.leaf(b_val.clone(), false);
    let prod = tape.mul(a, b).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), b_val.data());
    assert!(tape.grad(b).is_none());
}

#[test]
fn shared_leaf_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Tensor::<f64>::randn(&[4, 4], 0.5, &mut rng);
    let x1 = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
    let x2 = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);

    let single = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone(), true);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.gelu(y).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        tape.grad(wv).unwrap().clone()
    };
    let g1 = single(&x1);
    let g2 = single(&x2);

    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone(), true);
    let a = tape.constant(x1);
    let b = tape.constant(x2);
    let ya = tape.matmul(a, wv).unwrap();
    let ya = tape.gelu(ya).unwrap();
    let yb = tape.matmul(b, wv).unwrap();
    let yb = tape.gelu(yb).unwrap();
    let la = tape.sum(ya).unwrap();
    let lb = tape.sum(yb).unwrap();
    let l = tape.add(la, lb).unwrap();
    tape.backward(l).unwrap();
    let shared = tape.grad(wv).unwrap();
    for ((s, a), b) in shared.data().iter().zip(g1.data()).zip(g2.data()) {
        assert!((s - (a + b)).abs() < 1e-12);
    }
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[2, 2]), true);
    assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn finite_diff_examples() {
    let x = Tensor::<f64>::scalar(3.0);
    let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, 1e-4).unwrap();
    assert!((g.item() - 6.0).abs() < 1e-6);

    let x = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
    let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-3).unwrap();
    assert_eq!(g.data(), &[0.0; 3]);

    assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
}

#[test]
fn softmax_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::<f64>::randn(&[4, 5], 1.5, &mut rng);
    let f = |t: &Tensor<f64>| -> crate::Result<(Tape<f64>, Var, Var)> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), true);
        let s = tape.softmax_rows(v)?;
        let col = tape.slice(s, 0, 4, 0, 1)?;
        let l = tape.sum(col)?;
        Ok((tape, v, l))
    };
    let (mut tape, v, l) = f(&x).unwrap();
    tape.backward(l).unwrap();
    let analytic = tape.grad(v).unwrap().clone();
    let numeric = finite_diff_grad(
        |t| {
            let (tape, _, l) = f(t)?;
            Ok(tape.value(l).item())
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(relative_error(&analytic, &numeric) < 1e-5);
}

/// One primitive under test: builds `op(inputs)` on the tape.
type Build<T> = fn(&mut Tape<T>, &[Var]) -> crate::Result<Var>;

type Case<T> = (&'static str, Vec<Vec<usize>>, Build<T>);

fn primitives<T: Scalar>() -> Vec<Case<T>> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 5]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], T::of(-1.7))),
        ("mul_scalar", vec![vec![3, 4], vec![1]], |t, v| t.mul_scalar(v[0], v[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| t.add_bias(v[0], v[1])),
        ("gelu", vec![vec![3, 4]], |t, v| t.gelu(v[0])),
        ("exp", vec![vec![3, 4]], |t, v| t.exp(v[0])),
        ("log", vec![vec![3, 4]], |t, v| {
            let e = t.exp(v[0])?;
            t.log(e)
        }),
        ("softmax_rows", vec![vec![3, 6]], |t, v| t.softmax_rows(v[0])),
        ("log_softmax_rows", vec![vec![3, 6]], |t, v| t.log_softmax_rows(v[0])),
        ("log_sum_exp_rows", vec![vec![3, 6]], |t, v| t.log_sum_exp_rows(v[0])),
        ("layer_norm", vec![vec![3, 8], vec![8], vec![8]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], T::of(1e-5))
        }),
        ("l2_normalize_rows", vec![vec![3, 5]], |t, v| t.l2_normalize_rows(v[0])),
        ("sum", vec![vec![3, 4]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
        ("concat_cols", vec![vec![3, 2], vec![3, 3]], |t, v| t.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| t.concat_rows(&[v[0], v[1]])),
        ("gather_rows", vec![vec![4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2])),
        ("slice", vec![vec![4, 5]], |t, v| t.slice(v[0], 1, 2, 2, 3)),
        ("reshape", vec![vec![4, 3]], |t, v| t.reshape(v[0], &[2, 6])),
        ("batch_matmul", vec![vec![6, 4], vec![12, 2]], |t, v| t.batch_matmul(v[0], v[1], 3, false)),
        ("batch_matmul_nt", vec![vec![6, 4], vec![9, 4]], |t, v| t.batch_matmul(v[0], v[1], 3, true)),
        ("group_scale", vec![vec![8, 3], vec![2]], |t, v| t.group_scale(v[0], v[1], 4)),
        ("group_scale_shared", vec![vec![8, 3], vec![1]], |t, v| t.group_scale(v[0], v[1], 4)),
        ("shaped_mix", vec![vec![12, 3], vec![2], vec![2], vec![2]], |t, v| {
            t.shaped_mix(v[0], v[1], v[2], v[3], 4)
        }),
    ]
}

/// Random projection `Σ r ∘ op(x)` so the check covers the full Jacobian.
fn projected<T: Scalar>(
    build: Build<T>,
    inputs: &[Tensor<T>],
    proj_seed: u64,
) -> crate::Result<(Tape<T>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let r = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = tape.mul(out, r)?;
    let l = tape.sum(p)?;
    Ok((tape, vars, l))
}

fn check_primitives<T: Scalar>(trials: usize, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for (name, shapes, build) in primitives::<T>() {
        let build64 = primitives::<f64>()
            .into_iter()
            .find(|p| p.0 == name)
            .unwrap()
            .2;
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let inputs: Vec<Tensor<T>> = shapes
                .iter()
                .map(|s| Tensor::randn(s, 1.0, &mut rng))
                .collect();
            let (mut tape, vars, l) = projected(build, &inputs, trial as u64).unwrap();
            tape.backward(l).unwrap();
            for (k, v) in vars.iter().enumerate() {
                let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
                // finite differences evaluated in f64 at the same point
                let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|x| x.cast()).collect();
                let numeric = finite_diff_grad(
                    |x| {
                        let mut ins = inputs64.clone();
                        ins[k] = x.clone();
                        let (tape, _, l) = projected(build64, &ins, trial as u64)?;
                        Ok(tape.value(l).item())
                    },
                    &inputs64[k],
                    1e-6,
                )
                .unwrap();
                worst = worst.max(relative_error(&analytic, &numeric));
            }
        }
        assert!(worst <= tol, "{name}: rel err {worst:e} > {tol:e}");
    }
}

#[test]
fn primitive_jacobians_f64() {
    check_primitives::<f64>(100, 1e-6);
}

#[test]
fn primitive_jacobians_f32() {
    check_primitives::<f32>(100, 1e-4);
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::randn(&[6, 8], 1.0, &mut rng), true);
        let w = tape.leaf(Tensor::randn(&[8, 8], 0.3, &mut rng), true);
        let y = tape.matmul(x, w).unwrap();
        let y = tape.softmax_rows(y).unwrap();
        let l = tape.mean(y).unwrap();
        let y2 = tape.gelu(x).unwrap();
        let l2 = tape.sum(y2).unwrap();
        let l = tape.add(l, l2).unwrap();
        tape.backward(l).unwrap();
        (
            tape.value(l).item().to_bits(),
            tape.grad(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_matmul_matches_per_group_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[9, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.batch_matmul(va, vb, 3, true).unwrap();
    assert_eq!(tape.shape(out), &[6, 3]);
    for g in 0..3 {
        for i in 0..2 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|k| a.at(2 * g + i, k) * b.at(3 * g + j, k)).sum();
                assert!((tape.value(out).at(2 * g + i, j) - want).abs() < 1e-12);
            }
        }
    }
}
