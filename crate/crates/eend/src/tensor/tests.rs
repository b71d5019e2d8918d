use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tensor_new_rejects_length_mismatch() {
    let err = Tensor::<f64>::new(&[2, 3], vec![1.0; 5]).unwrap_err();
    assert!(matches!(err, TensorError::LengthMismatch { len: 5, .. }));
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Evaluate a tape-built scalar loss over the given leaves.
fn tape_loss(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).data()[0]
}

/// Analytic gradients of the same loss w.r.t. every leaf.
fn tape_grads(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    vars.iter().map(|&v| tape.grad(v)).collect()
}

/// Assert analytic and central-difference gradients agree for every leaf.
fn assert_grads_match(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + Copy,
    tol: f64,
    label: &str,
) {
    let analytic = tape_grads(inputs, build);
    let numeric = finite_diff_gradients(|xs| tape_loss(xs, build), inputs, 1e-5);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = max_relative_error(a, n);
        assert!(
            err <= tol,
            "{label}: input {i} gradient mismatch, rel err {err:.3e} > {tol:.0e}"
        );
    }
}

// ---- named examples ------------------------------------------------------

#[test]
fn matmul_identity_and_inner_product() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.leaf(Tensor::eye(2));
    let m = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let prod = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = tape.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let z = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(z).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[2, 2]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences_tightly() {
    // sum(a . b) is linear, so central differences are essentially exact.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let p = t.matmul(v[0], v[1]).unwrap();
        t.sum_all(p)
    };
    let analytic = tape_grads(&inputs, build);
    let numeric = finite_diff_gradients(|xs| tape_loss(xs, build), &inputs, 1e-5);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(max_relative_error(a, n) <= 1e-6);
    }
}

#[test]
fn softmax_columns_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![0.0, 1000.0], vec![0.0, 1000.0]]).unwrap());
    let s = tape.softmax_cols(a).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 0.5).abs() < 1e-12, "symmetric columns must split evenly");
    }

    let b = tape.leaf(Tensor::from_rows(&[vec![0.0], vec![3.0f64.ln()]]).unwrap());
    let s = tape.softmax_cols(b).unwrap();
    assert!((tape.value(s).at(0, 0) - 0.25).abs() < 1e-12);
    assert!((tape.value(s).at(1, 0) - 0.75).abs() < 1e-12);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let gain = tape.leaf(Tensor::full(&[2, 1], 1.0));
    let bias = tape.leaf(Tensor::zeros(&[2, 1]));

    // Constant column: variance floored by epsilon, output zeros.
    let c = tape.leaf(Tensor::full(&[2, 3], 5.0));
    let out = tape.layer_norm(c, gain, bias).unwrap();
    for &v in tape.value(out).data() {
        assert_eq!(v, 0.0);
    }

    // Column [1, 3]: mean 2, std 1 (up to epsilon).
    let x = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
    let out = tape.layer_norm(x, gain, bias).unwrap();
    assert!((tape.value(out).at(0, 0) + 1.0).abs() < 1e-4);
    assert!((tape.value(out).at(1, 0) - 1.0).abs() < 1e-4);

    // gain = 0 broadcasts the bias.
    let zero_gain = tape.leaf(Tensor::zeros(&[2, 1]));
    let shift = tape.leaf(Tensor::from_rows(&[vec![0.25], vec![-0.75]]).unwrap());
    let x2 = tape.leaf(Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, -2.0]]).unwrap());
    let out = tape.layer_norm(x2, zero_gain, shift).unwrap();
    for c in 0..2 {
        assert_eq!(tape.value(out).at(0, c), 0.25);
        assert_eq!(tape.value(out).at(1, c), -0.75);
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).data()[0], 0.5);

    let m = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 0.0]]).unwrap());
    let f = tape.frobenius_sq(m);
    assert_eq!(tape.value(f).data()[0], 9.0);

    // bce(p = y exactly): clamp keeps each element below 2 * eps-ish.
    let y = tape.leaf(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
    let p = tape.leaf(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
    let b = tape.bce_elementwise(p, y).unwrap();
    for &v in tape.value(b).data() {
        assert!(v >= 0.0 && v <= 2.0 * BCE_EPS, "bce(p=y) = {v}");
    }
}

#[test]
fn lstm_step_examples() {
    let d = 4;
    let mut tape = Tape::<f64>::new();
    let zeros_w = LstmVars {
        w_ih: tape.leaf(Tensor::zeros(&[4 * d, d])),
        w_hh: tape.leaf(Tensor::zeros(&[4 * d, d])),
        bias: tape.leaf(Tensor::zeros(&[4 * d, 1])),
    };
    let x = tape.leaf(Tensor::zeros(&[d, 1]));
    let h = tape.leaf(Tensor::zeros(&[d, 1]));
    let c = tape.leaf(Tensor::zeros(&[d, 1]));
    let (h1, _) = lstm_step(&mut tape, x, (h, c), zeros_w).unwrap();
    for &v in tape.value(h1).data() {
        assert_eq!(v, 0.0, "zero weights and state must give a zero hidden state");
    }

    // Random weights: |h'| < 1 from the tanh gate.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = LstmVars {
        w_ih: tape.leaf(rand_tensor(&mut rng, &[4 * d, d])),
        w_hh: tape.leaf(rand_tensor(&mut rng, &[4 * d, d])),
        bias: tape.leaf(rand_tensor(&mut rng, &[4 * d, 1])),
    };
    let x = tape.leaf(rand_tensor(&mut rng, &[d, 1]));
    let h = tape.leaf(rand_tensor(&mut rng, &[d, 1]));
    let c = tape.leaf(rand_tensor(&mut rng, &[d, 1]));
    let (h1, _) = lstm_step(&mut tape, x, (h, c), w).unwrap();
    for &v in tape.value(h1).data() {
        assert!(v.abs() < 1.0);
    }
}

#[test]
fn lstm_step_gradients_match_finite_differences() {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        rand_tensor(&mut rng, &[4 * d, d]), // w_ih
        rand_tensor(&mut rng, &[4 * d, d]), // w_hh
        rand_tensor(&mut rng, &[4 * d, 1]), // bias
        rand_tensor(&mut rng, &[d, 1]),     // x
        rand_tensor(&mut rng, &[d, 1]),     // h
        rand_tensor(&mut rng, &[d, 1]),     // c
    ];
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let w = LstmVars {
            w_ih: v[0],
            w_hh: v[1],
            bias: v[2],
        };
        let (h1, c1) = lstm_step(t, v[3], (v[4], v[5]), w).unwrap();
        let hs = t.frobenius_sq(h1);
        let cs = t.frobenius_sq(c1);
        t.add(hs, cs).unwrap()
    };
    assert_grads_match(&inputs, build, 1e-4, "lstm_step");
}

// ---- per-op finite-difference sweep ---------------------------------------

/// Every op's analytic adjoint against central differences, 50 seeds.
#[test]
fn all_ops_gradients_match_finite_differences_over_seeds() {
    type Case = (
        &'static str,
        fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
        fn(&mut Tape<f64>, &[Var]) -> Var,
    );
    let cases: Vec<Case> = vec![
        (
            "matmul_nn",
            |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])],
            |t, v| {
                let p = t.matmul_t(v[0], v[1], false, false).unwrap();
                t.frobenius_sq(p)
            },
        ),
        (
            "matmul_tn",
            |r| vec![rand_tensor(r, &[4, 3]), rand_tensor(r, &[4, 2])],
            |t, v| {
                let p = t.matmul_t(v[0], v[1], true, false).unwrap();
                t.frobenius_sq(p)
            },
        ),
        (
            "matmul_nt",
            |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[2, 4])],
            |t, v| {
                let p = t.matmul_t(v[0], v[1], false, true).unwrap();
                t.frobenius_sq(p)
            },
        ),
        (
            "matmul_tt",
            |r| vec![rand_tensor(r, &[4, 3]), rand_tensor(r, &[2, 4])],
            |t, v| {
                let p = t.matmul_t(v[0], v[1], true, true).unwrap();
                t.frobenius_sq(p)
            },
        ),
        (
            "add_sub_mul_scale",
            |r| vec![rand_tensor(r, &[3, 3]), rand_tensor(r, &[3, 3])],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(s, v[1]).unwrap();
                let m = t.mul(d, v[1]).unwrap();
                let k = t.scale(m, -1.7).unwrap();
                t.frobenius_sq(k)
            },
        ),
        (
            "add_col_vec",
            |r| vec![rand_tensor(r, &[4, 5]), rand_tensor(r, &[4, 1])],
            |t, v| {
                let s = t.add_col_vec(v[0], v[1]).unwrap();
                t.frobenius_sq(s)
            },
        ),
        (
            "sigmoid_tanh",
            |r| vec![rand_tensor(r, &[3, 4])],
            |t, v| {
                let s = t.sigmoid(v[0]);
                let u = t.tanh(s);
                t.frobenius_sq(u)
            },
        ),
        (
            "relu",
            |r| {
                // keep inputs away from the kink at zero
                let mut t = rand_tensor(r, &[3, 4]);
                for x in t.data_mut() {
                    if x.abs() < 0.05 {
                        *x += 0.1_f64.copysign(*x + 0.01);
                    }
                }
                vec![t]
            },
            |t, v| {
                let u = t.relu(v[0]);
                t.frobenius_sq(u)
            },
        ),
        (
            "softmax_cols",
            |r| vec![rand_tensor(r, &[4, 3])],
            |t, v| {
                let s = t.softmax_cols(v[0]).unwrap();
                t.frobenius_sq(s)
            },
        ),
        (
            "layer_norm",
            |r| {
                vec![
                    rand_tensor(r, &[5, 3]),
                    rand_tensor(r, &[5, 1]),
                    rand_tensor(r, &[5, 1]),
                ]
            },
            |t, v| {
                let n = t.layer_norm(v[0], v[1], v[2]).unwrap();
                t.frobenius_sq(n)
            },
        ),
        (
            "concat_rows_cols",
            |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])],
            |t, v| {
                let rows = t.concat_rows(&[v[0], v[1]]).unwrap();
                let cols = t.concat_cols(&[v[0], v[1]]).unwrap();
                let a = t.frobenius_sq(rows);
                let b = t.frobenius_sq(cols);
                t.add(a, b).unwrap()
            },
        ),
        (
            "slices_and_gather",
            |r| vec![rand_tensor(r, &[4, 5])],
            |t, v| {
                let rows = t.slice_rows(v[0], 1, 2).unwrap();
                let col = t.slice_col(v[0], 3).unwrap();
                let gathered = t.gather_cols(v[0], &[4, 0, 2, 2]).unwrap();
                let a = t.frobenius_sq(rows);
                let b = t.frobenius_sq(col);
                let c = t.frobenius_sq(gathered);
                let ab = t.add(a, b).unwrap();
                t.add(ab, c).unwrap()
            },
        ),
        (
            "transpose",
            |r| vec![rand_tensor(r, &[3, 5])],
            |t, v| {
                let tr = t.transpose(v[0]).unwrap();
                t.frobenius_sq(tr)
            },
        ),
        (
            "mean_list_sum",
            |r| {
                vec![
                    rand_tensor(r, &[3, 2]),
                    rand_tensor(r, &[3, 2]),
                    rand_tensor(r, &[3, 2]),
                ]
            },
            |t, v| {
                let m = t.mean_list(v).unwrap();
                let sq = t.mul(m, m).unwrap();
                t.sum_all(sq)
            },
        ),
        (
            "bce",
            |r| {
                let n = 12;
                let p = (0..n).map(|_| r.gen_range(0.05..0.95)).collect();
                let y = (0..n)
                    .map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 })
                    .collect();
                vec![
                    Tensor::new(&[3, 4], p).unwrap(),
                    Tensor::new(&[3, 4], y).unwrap(),
                ]
            },
            |t, v| {
                let b = t.bce_elementwise(v[0], v[1]).unwrap();
                t.sum_all(b)
            },
        ),
    ];

    for (name, gen, build) in cases {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let inputs = gen(&mut rng);
            assert_grads_match(&inputs, build, 1e-4, name);
        }
    }
}

// ---- invariants ------------------------------------------------------------

#[test]
fn softmax_columns_sum_to_one_and_layer_norm_is_standardized() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(2..9);
        let cols = rng.gen_range(1..7);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[rows, cols]));
        let s = tape.softmax_cols(x).unwrap();
        for c in 0..cols {
            let sum: f64 = (0..rows).map(|r| tape.value(s).at(r, c)).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }

        let gain = tape.leaf(Tensor::full(&[rows, 1], 1.0));
        let bias = tape.leaf(Tensor::zeros(&[rows, 1]));
        // non-degenerate input: a per-row ramp keeps column variance well
        // above the epsilon floor
        let mut spread = rand_tensor(&mut rng, &[rows, cols]);
        for r in 0..rows {
            for c in 0..cols {
                let v = spread.at(r, c) + 3.0 * r as f64;
                spread.set(r, c, v);
            }
        }
        let spread = tape.leaf(spread);
        let n = tape.layer_norm(spread, gain, bias).unwrap();
        for c in 0..cols {
            let mean: f64 = (0..rows).map(|r| tape.value(n).at(r, c)).sum::<f64>() / rows as f64;
            let var: f64 = (0..rows)
                .map(|r| (tape.value(n).at(r, c) - mean).powi(2))
                .sum::<f64>()
                / rows as f64;
            assert!(mean.abs() <= 1e-6, "column mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "column variance {var}");
        }
    }
}

#[test]
fn backward_is_deterministic_bit_for_bit() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inputs = [rand_tensor(&mut rng, &[6, 5]), rand_tensor(&mut rng, &[6, 5])];
        tape_grads(&inputs, |t, v| {
            let m = t.matmul_t(v[0], v[1], false, true).unwrap();
            let s = t.softmax_cols(m).unwrap();
            let l = t.mul(s, m).unwrap();
            t.sum_all(l)
        })
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data(), "gradients must be bit-identical");
    }
}

#[test]
fn inference_tape_records_nothing() {
    let mut tape = Tape::<f64>::inference();
    let a = tape.leaf(Tensor::full(&[2, 2], 2.0));
    let b = tape.matmul(a, a).unwrap();
    assert_eq!(tape.value(b).data(), &[8.0, 8.0, 8.0, 8.0]);
    assert!(!tape.is_recording());
    // backward finds no records, so the leaf gradient stays zero
    let loss = tape.sum_all(b);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).data(), &[0.0; 4]);
}
