use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(f: impl FnOnce(&Tape) -> Result<Var, crate::Error>) -> Tensor {
    let tape = Tape::no_grad();
    f(&tape).unwrap().value().clone()
}

const GRAD_TOL: f64 = 1e-6;
const GRAD_FLOOR: f64 = 1e-6;

fn assert_grads(inputs: &[Tensor], f: impl Fn(&Tape, &[Var]) -> Result<Var, crate::Error>) {
    let check = check_gradients(inputs, FD_STEP, f).unwrap();
    let err = check.max_relative_error(GRAD_FLOOR);
    assert!(err < GRAD_TOL, "max relative gradient error {err:e}");
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(tape: &Tape, y: &Var) -> Var {
    let n = y.value().numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let w = tape.constant(Tensor::from_parts(y.shape().to_vec(), w));
    tape.sum(&tape.mul(y, &w).unwrap())
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let out = eval(|tp| tp.matmul(&tp.constant(a.clone()), &tp.constant(Tensor::identity(2))));
    assert_eq!(out, a);
    let out = eval(|tp| {
        tp.matmul(
            &tp.constant(t(&[1, 2], &[1.0, 2.0])),
            &tp.constant(t(&[2, 1], &[3.0, 4.0])),
        )
    });
    assert_eq!(out.data(), &[11.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = random(&mut rng, &[3, 2]);
    let out = eval(|tp| tp.matmul(&tp.constant(Tensor::zeros(&[2, 3])), &tp.constant(b)));
    assert_eq!(out, Tensor::zeros(&[2, 2]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::no_grad();
    let err = tape
        .matmul(
            &tape.constant(Tensor::zeros(&[2, 3])),
            &tape.constant(Tensor::zeros(&[2, 3])),
        )
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let out = eval(|tp| tp.softmax(&tp.constant(t(&[2], &[0.0, 0.0]))));
    assert_eq!(out.data(), &[0.5, 0.5]);
    let out = eval(|tp| tp.softmax(&tp.constant(t(&[1], &[42.0]))));
    assert_eq!(out.data(), &[1.0]);
    let out = eval(|tp| tp.softmax(&tp.constant(t(&[2], &[1.0, 2.0]))));
    assert!((out.data()[0] - 0.26894).abs() < 1e-5);
    assert!((out.data()[1] - 0.73106).abs() < 1e-5);
}

#[test]
fn layer_norm_examples() {
    let ones = t(&[2], &[1.0, 1.0]);
    let zeros = Tensor::zeros(&[2]);
    let out = eval(|tp| {
        tp.layer_norm(
            &tp.constant(t(&[1, 2], &[5.0, 5.0])),
            &tp.constant(ones.clone()),
            &tp.constant(zeros.clone()),
            1e-5,
        )
    });
    assert_eq!(out.data(), &[0.0, 0.0]);
    let out = eval(|tp| {
        tp.layer_norm(
            &tp.constant(t(&[1, 2], &[1.0, 3.0])),
            &tp.constant(ones.clone()),
            &tp.constant(zeros.clone()),
            1e-14,
        )
    });
    assert!((out.data()[0] + 1.0).abs() < 1e-12 && (out.data()[1] - 1.0).abs() < 1e-12);
    let b = t(&[2], &[0.3, -0.7]);
    let out = eval(|tp| {
        tp.layer_norm(
            &tp.constant(t(&[1, 2], &[4.0, -9.0])),
            &tp.constant(Tensor::zeros(&[2])),
            &tp.constant(b.clone()),
            1e-5,
        )
    });
    assert_eq!(out.data(), b.data());
}

#[test]
fn depthwise_conv_examples() {
    // Caller adds the v_t skip; here we check conv + v.
    let v = t(&[3, 1], &[1.0, 2.0, 3.0]);
    let with_skip = |left: &[f64], right: Option<&[f64]>| {
        eval(|tp| {
            let vv = tp.constant(v.clone());
            let l = tp.constant(t(&[left.len(), 1], left));
            let r = right.map(|r| tp.constant(t(&[r.len(), 1], r)));
            let m = tp.depthwise_conv1d(&vv, &l, r.as_ref(), None)?;
            tp.add(&m, &vv)
        })
    };
    assert_eq!(with_skip(&[0.0, 0.0], Some(&[0.0])).data(), v.data());
    assert_eq!(with_skip(&[1.0, 1.0], Some(&[1.0])).data(), &[4.0, 8.0, 8.0]);
    assert_eq!(with_skip(&[1.0], None).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn depthwise_conv_rejects_bad_taps() {
    let tape = Tape::no_grad();
    let v = tape.constant(Tensor::zeros(&[3, 2]));
    let l = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.depthwise_conv1d(&v, &l, None, None).is_err());
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::no_grad();
    let v = 5;
    let loss = tape
        .cross_entropy(&tape.constant(Tensor::zeros(&[2, v])), &[1, 3], 0.1, None, Reduction::Mean)
        .unwrap();
    assert!((loss.value().item() - (v as f64).ln()).abs() < 1e-12);

    let loss = tape
        .cross_entropy(&tape.constant(t(&[1, 3], &[0.0, 800.0, 0.0])), &[1], 0.0, None, Reduction::Mean)
        .unwrap();
    assert!(loss.value().item().abs() < 1e-12);

    let logits = t(&[1, 2], &[0.9f64.ln(), 0.1f64.ln()]);
    let loss = tape
        .cross_entropy(&tape.constant(logits), &[0], 0.1, None, Reduction::Mean)
        .unwrap();
    let expected = 0.95 * -(0.9f64.ln()) + 0.05 * -(0.1f64.ln());
    assert!((loss.value().item() - expected).abs() < 1e-12);
    assert!((loss.value().item() - 0.21523).abs() < 1e-5);
}

#[test]
fn cross_entropy_mask_and_index_errors() {
    let tape = Tape::no_grad();
    let logits = tape.constant(t(&[2, 2], &[0.0, 5.0, 9.0, -3.0]));
    let masked = tape
        .cross_entropy(&logits, &[1, 1], 0.0, Some(&[false, true]), Reduction::Mean)
        .unwrap();
    let single = tape
        .cross_entropy(&tape.constant(t(&[1, 2], &[0.0, 5.0])), &[1], 0.0, None, Reduction::Mean)
        .unwrap();
    assert_eq!(masked.value().item(), single.value().item());
    assert!(matches!(
        tape.cross_entropy(&logits, &[0, 2], 0.0, None, Reduction::Sum),
        Err(crate::Error::Index { .. })
    ));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[1], &[3.0]));
    let loss = tape.sum(&tape.mul(&x, &x).unwrap());
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[6.0]);
    // a second sweep is refused
    assert!(tape.backward(&loss).is_err());

    let tape = Tape::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]));
    let loss = tape.sum(&tape.matmul(&a, &tape.constant(Tensor::identity(2))).unwrap());
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&a).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2]));
    let y = tape.scale(&a, 2.0);
    assert!(matches!(tape.backward(&y), Err(crate::Error::Contract(_))));
}

#[test]
fn attention_rejects_fully_masked_row() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    let mask = Mask::from_fn(2, 2, |i, _| i == 0);
    assert!(matches!(
        tape.attention(&x, &x, &x, 1, Some(&mask)),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn grad_matmul_add_bias_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]), random(&mut rng, &[2])];
    assert_grads(&inputs, |tp, v| {
        let y = tp.add_bias(&tp.matmul(&v[0], &v[1])?, &v[2])?;
        Ok(probe(tp, &tp.relu(&y)))
    });
}

#[test]
fn grad_elementwise_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])];
    assert_grads(&inputs, |tp, v| {
        let y = tp.mul(&tp.add(&v[0], &v[1])?, &v[0])?;
        Ok(probe(tp, &tp.scale(&y, -1.5)))
    });
}

#[test]
fn grad_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&mut rng, &[3, 5])];
    assert_grads(&inputs, |tp, v| Ok(probe(tp, &tp.softmax(&v[0])?)));
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&mut rng, &[3, 6]), random(&mut rng, &[6]), random(&mut rng, &[6])];
    assert_grads(&inputs, |tp, v| Ok(probe(tp, &tp.layer_norm(&v[0], &v[1], &v[2], 1e-5)?)));
}

#[test]
fn grad_depthwise_conv_bidirectional_and_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&mut rng, &[5, 3]), random(&mut rng, &[3, 3]), random(&mut rng, &[2, 3])];
    assert_grads(&inputs, |tp, v| {
        Ok(probe(tp, &tp.depthwise_conv1d(&v[0], &v[1], Some(&v[2]), None)?))
    });
    let inputs = [random(&mut rng, &[4, 2]), random(&mut rng, &[3, 2]), random(&mut rng, &[2, 2])];
    assert_grads(&inputs, |tp, v| {
        Ok(probe(tp, &tp.depthwise_conv1d(&v[0], &v[1], None, Some(&v[2]))?))
    });
}

#[test]
fn grad_attention_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4])];
    let mask = Mask::from_fn(3, 5, |i, j| j <= i + 1);
    assert_grads(&inputs, |tp, v| Ok(probe(tp, &tp.attention(&v[0], &v[1], &v[2], 2, Some(&mask))?)));
    assert_grads(&inputs, |tp, v| Ok(probe(tp, &tp.attention(&v[0], &v[1], &v[2], 4, None)?)));
}

#[test]
fn grad_concat_slice_reshape_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&mut rng, &[2, 3]), random(&mut rng, &[1, 3]), random(&mut rng, &[3, 2])];
    assert_grads(&inputs, |tp, v| {
        let rows = tp.concat_rows(&[&v[0], &v[1]])?;
        let cols = tp.concat_cols(&[&rows, &v[2]])?;
        let s = tp.slice_rows(&cols, 1, 2)?;
        let r = tp.reshape(&s, &[1, 10])?;
        let g = tp.gather_rows(&cols, &[Some(2), None, Some(0), Some(2)])?;
        let a = probe(tp, &r);
        let b = probe(tp, &g);
        tp.add(&a, &b)
    });
}

#[test]
fn grad_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [random(&mut rng, &[4, 5])];
    assert_grads(&inputs, |tp, v| {
        tp.cross_entropy(&v[0], &[0, 4, 2, 2], 0.1, Some(&[false, false, true, false]), Reduction::Mean)
    });
    assert_grads(&inputs, |tp, v| tp.cross_entropy(&v[0], &[1, 1, 3, 0], 0.0, None, Reduction::Sum));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let a = tape.leaf(random(&mut rng, &[4, 4]));
        let b = tape.leaf(random(&mut rng, &[4, 4]));
        let y = tape.attention(&a, &b, &b, 2, None).unwrap();
        let y = tape.matmul(&y, &a).unwrap();
        let loss = tape.sum(&tape.softmax(&y).unwrap());
        let loss = tape.add(&loss, &tape.sum(&tape.mul(&y, &y).unwrap())).unwrap();
        let g = tape.backward(&loss).unwrap();
        (g.get(&a).unwrap().clone(), g.get(&b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), a2.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1, b2);
}

#[test]
fn dropout_is_seeded_and_inverted() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::full(&[50, 20], 1.0));
    let d1 = Dropout::new(0.1, ChaCha8Rng::seed_from_u64(3));
    let d2 = Dropout::new(0.1, ChaCha8Rng::seed_from_u64(3));
    let y1 = d1.apply(&tape, &x).unwrap();
    let y2 = d2.apply(&tape, &x).unwrap();
    assert_eq!(y1.value(), y2.value());
    let kept = y1.value().data().iter().filter(|&&v| v > 0.0).count();
    assert!((850..=950).contains(&kept), "kept {kept}");
    for &v in y1.value().data() {
        assert!(v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15);
    }
    let off = Dropout::disabled();
    assert_eq!(off.apply(&tape, &x).unwrap().value(), x.value());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        data in prop::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let x = Tensor::new(&[3, 4], data.clone()).unwrap();
        let shifted = x.map(|v| v + shift);
        let y = eval(|tp| tp.softmax(&tp.constant(x.clone())));
        let ys = eval(|tp| tp.softmax(&tp.constant(shifted.clone())));
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(y.max_abs_diff(&ys) < 1e-12);
    }

    #[test]
    fn depthwise_conv_context_matches_concatenation(
        seed in 0u64..1000,
        t_len in 1usize..8,
        ctx_rows in 0usize..4,
        l_left in 1usize..5,
    ) {
        let ctx_rows = ctx_rows.min(l_left - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let prev = random(&mut rng, &[ctx_rows.max(1), d]);
        let v = random(&mut rng, &[t_len, d]);
        let taps = random(&mut rng, &[l_left, d]);
        let streamed = eval(|tp| {
            let ctx = (ctx_rows > 0).then(|| tp.constant(prev.clone()));
            tp.depthwise_conv1d(&tp.constant(v.clone()), &tp.constant(taps.clone()), None, ctx.as_ref())
        });
        let full = eval(|tp| {
            let seq = if ctx_rows > 0 {
                tp.concat_rows(&[&tp.constant(prev.clone()), &tp.constant(v.clone())])?
            } else {
                tp.constant(v.clone())
            };
            let out = tp.depthwise_conv1d(&seq, &tp.constant(taps.clone()), None, None)?;
            tp.slice_rows(&out, ctx_rows, t_len)
        });
        prop_assert_eq!(streamed, full);
    }
}
