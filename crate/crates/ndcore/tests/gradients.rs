use ndcore::numdiff::{central_gradient, max_relative_error};
use ndcore::{NdError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Checks the tape gradient of a scalar function of one input against central
/// differences of the same forward function.
fn check_unary_graph(input: &Tensor, build: impl Fn(&mut Tape, Var) -> Var, tol: f64) {
    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let y = build(&mut tape, x);
    tape.backward(y).unwrap();
    let analytic = tape.grad(x).unwrap().into_data();
    let numeric = central_gradient(
        |v| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(input.shape(), v.to_vec()).unwrap());
            let y = build(&mut t, x);
            t.value(y).item()
        },
        input.data(),
        STEP,
    );
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < tol, "relative error {err:e} exceeds {tol:e}\n{analytic:?}\n{numeric:?}");
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var) -> Var {
    let n = tape.value(y).numel();
    let shape = tape.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = tape.constant(Tensor::new(&shape, w).unwrap());
    let p = tape.mul(y, w).unwrap();
    tape.sum(p, None).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let ia = tape.matmul(i, a).unwrap();
    assert_eq!(tape.value(ia), tape.value(a));

    let ones = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
    let p = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(p).shape(), &[2, 1]);
    assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(NdError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b0 = random(&mut rng, &[4, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let a = tape.param(a0.clone());
    let b = tape.constant(b0.clone());
    let c = tape.matmul(a, b).unwrap();
    let s = tape.sum(c, None).unwrap();
    tape.backward(s).unwrap();
    let grad = tape.grad(a).unwrap();
    // ones(3x2) · Bᵀ: every row equals the row sums of B.
    for i in 0..3 {
        for p in 0..4 {
            let expected = b0.at(p, 0) + b0.at(p, 1);
            assert!((grad.at(i, p) - expected).abs() < 1e-15);
        }
    }
    let numeric = central_gradient(
        |v| {
            let mut t = Tape::new();
            let a = t.constant(Tensor::new(&[3, 4], v.to_vec()).unwrap());
            let b = t.constant(b0.clone());
            let c = t.matmul(a, b).unwrap();
            let s = t.sum(c, None).unwrap();
            t.value(s).item()
        },
        a0.data(),
        STEP,
    );
    assert!(max_relative_error(grad.data(), &numeric, 1e-6) < 1e-6);
}

#[test]
fn matmul_gradient_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b0 = random(&mut rng, &[4, 2], -1.0, 1.0);
    check_unary_graph(
        &a0,
        |t, a| {
            let b = t.constant(b0.clone());
            let c = t.matmul(a, b).unwrap();
            weighted_sum(t, c)
        },
        1e-6,
    );
    check_unary_graph(
        &b0,
        |t, b| {
            let a = t.constant(a0.clone());
            let c = t.matmul(a, b).unwrap();
            weighted_sum(t, c)
        },
        1e-6,
    );
}

#[test]
fn elementwise_fixed_points() {
    let mut tape = Tape::new();
    let z = tape.scalar(0.0);
    let s = tape.sigmoid(z);
    let th = tape.tanh(z);
    assert_eq!(tape.value(s).item(), 0.5);
    assert_eq!(tape.value(th).item(), 0.0);
}

#[test]
fn sigmoid_derivative_matches_finite_difference() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.5));
    let y = tape.sigmoid(x);
    tape.backward(y).unwrap();
    let analytic = tape.grad(x).unwrap().item();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let numeric = (sig(1.5 + STEP) - sig(1.5 - STEP)) / (2.0 * STEP);
    assert!((analytic - numeric).abs() < 1e-8);
}

#[test]
fn log_rejects_non_positive() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(NdError::Domain { .. })));
    let y = tape.constant(Tensor::vector(&[-2.0]));
    assert!(tape.log(y).is_err());
}

#[test]
fn binary_shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, b), Err(NdError::Shape { .. })));
    let c = tape.constant(Tensor::zeros(&[2, 1]));
    assert!(tape.mul(a, c).is_err(), "no implicit broadcasting between [2] and [2,1]");
}

#[test]
fn every_unary_op_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3], 0.2, 1.5);
    let signed = random(&mut rng, &[2, 3], -1.5, 1.5).map(|v| if v.abs() < 0.1 { 0.5 } else { v });
    let cases: Vec<(&str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
        ("neg", signed.clone(), Box::new(|t, v| t.neg(v))),
        ("sigmoid", signed.clone(), Box::new(|t, v| t.sigmoid(v))),
        ("tanh", signed.clone(), Box::new(|t, v| t.tanh(v))),
        ("exp", signed.clone(), Box::new(|t, v| t.exp(v))),
        ("log", x.clone(), Box::new(|t, v| t.log(v).unwrap())),
        ("abs", signed.clone(), Box::new(|t, v| t.abs(v))),
        ("square", signed.clone(), Box::new(|t, v| t.square(v))),
        ("sqrt", x.clone(), Box::new(|t, v| t.sqrt(v).unwrap())),
        ("recip", x.clone(), Box::new(|t, v| t.recip(v))),
        ("clamp_min", signed.clone(), Box::new(|t, v| t.clamp_min(v, 0.0))),
        ("add_scalar", signed.clone(), Box::new(|t, v| t.add_scalar(v, 2.5))),
        ("mul_scalar", signed.clone(), Box::new(|t, v| t.mul_scalar(v, -1.75))),
    ];
    for (name, input, f) in cases {
        eprintln!("checking {name}");
        check_unary_graph(&input, |t, v| {
            let y = f(t, v);
            weighted_sum(t, y)
        }, 1e-5);
    }
}

#[test]
fn binary_ops_gradient_including_scalar_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a0 = random(&mut rng, &[2, 3], 0.5, 2.0);
    let b0 = random(&mut rng, &[2, 3], 0.5, 2.0);
    let s0 = Tensor::scalar(1.3);
    for kind in 0..4 {
        let op = move |t: &mut Tape, a: Var, b: Var| match kind {
            0 => t.add(a, b).unwrap(),
            1 => t.sub(a, b).unwrap(),
            2 => t.mul(a, b).unwrap(),
            _ => t.div(a, b).unwrap(),
        };
        for other in [&b0, &s0] {
            check_unary_graph(&a0, |t, a| {
                let b = t.constant(other.clone());
                let y = op(t, a, b);
                weighted_sum(t, y)
            }, 1e-5);
            check_unary_graph(other, |t, b| {
                let a = t.constant(a0.clone());
                let y = op(t, a, b);
                weighted_sum(t, y)
            }, 1e-5);
            // scalar on the left
            check_unary_graph(other, |t, b| {
                let a = t.constant(a0.clone());
                let y = op(t, b, a);
                weighted_sum(t, y)
            }, 1e-5);
        }
    }
}

#[test]
fn reductions_values_and_gradients() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(&[1.0, 2.0, 3.0]));
    let s = tape.sum(v, None).unwrap();
    assert_eq!(tape.value(s).item(), 6.0);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[1.0, 1.0, 1.0]);

    let c = tape.constant(Tensor::full(&[3, 4], 2.25));
    let m = tape.mean(c, None).unwrap();
    assert_eq!(tape.value(m).item(), 2.25);

    assert!(matches!(tape.sum(c, Some(2)), Err(NdError::Axis { axis: 2, rank: 2 })));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 4, 2], -1.0, 1.0);
    for axis in [None, Some(0), Some(1), Some(2)] {
        check_unary_graph(&x, |t, v| {
            let y = t.sum(v, axis).unwrap();
            weighted_sum(t, y)
        }, 1e-6);
        check_unary_graph(&x, |t, v| {
            let y = t.mean(v, axis).unwrap();
            weighted_sum(t, y)
        }, 1e-6);
        check_unary_graph(&x, |t, v| {
            let y = t.max(v, axis).unwrap();
            weighted_sum(t, y)
        }, 1e-6);
    }
}

#[test]
fn max_ties_go_to_first_index() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(&[1.0, 5.0, 5.0, 2.0]));
    let m = tape.max(v, None).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

    let mut tape = Tape::new();
    let v = tape.param(Tensor::from_rows(&[&[3.0, 3.0], &[0.0, 4.0]]).unwrap());
    let m = tape.max(v, Some(1)).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 4.0]);
    let s = tape.sum(m, None).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::new();
    let eq = tape.constant(Tensor::full(&[20], 0.7));
    let p = tape.softmax(eq).unwrap();
    for &v in tape.value(p).data() {
        assert!((v - 0.05).abs() < 1e-15);
    }
    let two = tape.constant(Tensor::vector(&[0.0, 3f64.ln()]));
    let p = tape.softmax(two).unwrap();
    let d = tape.value(p).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

    let bad = tape.constant(Tensor::vector(&[0.0, f64::NAN]));
    assert!(matches!(tape.softmax(bad), Err(NdError::Numeric { .. })));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[6], -2.0, 2.0);
    // Each output row of the Jacobian in turn.
    for k in 0..6 {
        check_unary_graph(&x, |t, v| {
            let p = t.softmax(v).unwrap();
            t.pick(p, k).unwrap()
        }, 1e-6);
    }
}

#[test]
fn backward_hand_calculus_and_accumulation() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 12.0);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(NdError::Shape { .. })));
}

#[test]
fn sum_sigmoid_of_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w0 = random(&mut rng, &[4, 3], -1.0, 1.0);
    let x0 = random(&mut rng, &[3, 1], -1.0, 1.0);
    check_unary_graph(&w0, |t, w| {
        let x = t.constant(x0.clone());
        let z = t.matmul(w, x).unwrap();
        let s = t.sigmoid(z);
        t.sum(s, None).unwrap()
    }, 1e-6);
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let other = random(&mut rng, &[3, 2], -1.0, 1.0);
    check_unary_graph(&x, |t, v| {
        let y = t.transpose(v).unwrap();
        weighted_sum(t, y)
    }, 1e-6);
    check_unary_graph(&x, |t, v| {
        let y = t.reshape(v, &[6, 2]).unwrap();
        weighted_sum(t, y)
    }, 1e-6);
    check_unary_graph(&x, |t, v| {
        let o = t.constant(other.clone());
        let y = t.concat(&[o, v, v], 1).unwrap();
        weighted_sum(t, y)
    }, 1e-6);
    check_unary_graph(&x, |t, v| {
        let y = t.concat(&[v, v], 0).unwrap();
        weighted_sum(t, y)
    }, 1e-6);
    check_unary_graph(&x, |t, v| {
        let y = t.slice(v, 1, 1, 2).unwrap();
        weighted_sum(t, y)
    }, 1e-6);
    check_unary_graph(&x, |t, v| {
        let y = t.slice(v, 0, 2, 1).unwrap();
        weighted_sum(t, y)
    }, 1e-6);
}

#[test]
fn concat_and_slice_values() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let s = tape.slice(c, 1, 1, 2).unwrap();
    assert_eq!(tape.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
    assert!(tape.slice(c, 1, 2, 2).is_err());
    assert!(tape.concat(&[a, b], 0).is_err());
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random(&mut rng, &[8, 8], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let a = t.constant(w.clone());
        let b = t.matmul(a, a).unwrap();
        let c = t.tanh(b);
        let p = t.flatten(c).unwrap();
        let s = t.softmax(p).unwrap();
        t.value(s).clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn independent_tapes_in_threads() {
    let handles: Vec<_> = (0..4)
        .map(|k| {
            std::thread::spawn(move || {
                let mut tape = Tape::new();
                let x = tape.param(Tensor::scalar(k as f64));
                let y = tape.square(x);
                tape.backward(y).unwrap();
                tape.grad(x).unwrap().item()
            })
        })
        .collect();
    let grads: Vec<f64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(grads, vec![0.0, 2.0, 4.0, 6.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_for_large_inputs(v in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&v));
        let p = tape.softmax(x).unwrap();
        let total: f64 = tape.value(p).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(tape.value(p).data().iter().all(|&q| q >= 0.0));
    }

    #[test]
    fn flatten_round_trip_preserves_bytes(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&mut rng, &[rows, cols], -1e6, 1e6);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let f = tape.flatten(x).unwrap();
        let back = tape.reshape(f, &[rows, cols]).unwrap();
        prop_assert_eq!(tape.value(back), &t);
    }

    #[test]
    fn random_composite_gradient(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = random(&mut rng, &[3, 3], -1.0, 1.0);
        let b0 = random(&mut rng, &[3, 2], -1.0, 1.0);
        let build = |t: &mut Tape, a: Var| {
            let b = t.constant(b0.clone());
            let c = t.matmul(a, b).unwrap();
            let d = t.tanh(c);
            let e = t.exp(d);
            let f = t.transpose(e).unwrap();
            let g = t.flatten(f).unwrap();
            let p = t.softmax(g).unwrap();
            let q = t.square(p);
            weighted_sum(t, q)
        };
        let mut tape = Tape::new();
        let x = tape.param(a0.clone());
        let y = build(&mut tape, x);
        tape.backward(y).unwrap();
        let analytic = tape.grad(x).unwrap().into_data();
        let numeric = central_gradient(|v| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(&[3, 3], v.to_vec()).unwrap());
            let y = build(&mut t, x);
            t.value(y).item()
        }, a0.data(), STEP);
        prop_assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-5);
    }

    #[test]
    fn container_round_trip(dims in proptest::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random(&mut rng, &dims, -1e9, 1e9);
        let mut buf = Vec::new();
        ndcore::io::write_all(&mut buf, &[t.clone(), t.clone()]).unwrap();
        let back = ndcore::io::read_all(&mut &buf[..]).unwrap();
        prop_assert_eq!(back, vec![t.clone(), t]);
    }
}
