use mneme_tensor::gradcheck::{check_gradients, relative_error, DEFAULT_STEP};
use mneme_tensor::{Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.2..1.5)).collect()).unwrap()
}

/// Reduces an arbitrary tensor to a scalar with fixed pseudo-random weights,
/// so every output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, v: Var) -> mneme_tensor::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn assert_grad_ok(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> mneme_tensor::Result<Var>) {
    let report = check_gradients(inputs, f, DEFAULT_STEP).unwrap();
    assert!(
        report.passes(1e-4),
        "{name}: max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(&Tensor::eye(2).unwrap());
    let m = tape.leaf(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.leaf(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    let v = tape.leaf(&Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
    let out = tape.matmul(p, v).unwrap();
    assert_eq!(tape.value(out), &[5.0, 0.0]);
    assert_eq!(tape.shape(out), &[2, 1]);
}

#[test]
fn matmul_shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]).unwrap());
    let b = tape.leaf(&Tensor::zeros(vec![2, 3]).unwrap());
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, vec![3, 4]);
    let b = random(&mut rng, vec![4, 2]);
    // d sum(A·B) / dA
    let mut tape = Tape::new();
    let mut at = a.clone();
    at.requires_grad = true;
    let av = tape.leaf(&at);
    let bv = tape.leaf(&b);
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c).unwrap();
    tape.backward(s).unwrap();
    let analytic = tape.grad(av).unwrap().to_vec();
    let h = 1e-5;
    for idx in 0..12 {
        let eval = |delta: f64| {
            let mut a2 = a.clone();
            a2.data_mut()[idx] += delta;
            let mut t = Tape::new();
            let x = t.leaf(&a2);
            let y = t.leaf(&b);
            let c = t.matmul(x, y).unwrap();
            let s = t.sum(c).unwrap();
            t.scalar(s)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(relative_error(analytic[idx], numeric) < 1e-5);
    }
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let x = tape.constant(vec![2], vec![1000.0, 0.0]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y)[0], 1.0);
    assert!(tape.value(y)[1] >= 0.0 && tape.value(y)[1] < 1e-300);
}

#[test]
fn softmax_jvp_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, vec![5]);
    let u = random(&mut rng, vec![5]);
    let dir = random(&mut rng, vec![5]);
    // uᵀ J v via the tape, against d/dh uᵀ softmax(x + h v).
    let mut tape = Tape::new();
    let mut xt = x.clone();
    xt.requires_grad = true;
    let xv = tape.leaf(&xt);
    let y = tape.softmax(xv, 0).unwrap();
    let uv = tape.leaf(&u);
    let p = tape.mul(y, uv).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    let analytic: f64 = tape.grad(xv).unwrap().iter().zip(dir.data()).map(|(g, d)| g * d).sum();

    let eval = |h: f64| {
        let shifted: Vec<f64> = x.data().iter().zip(dir.data()).map(|(a, b)| a + h * b).collect();
        let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = shifted.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().zip(u.data()).map(|(a, b)| a / z * b).sum::<f64>()
    };
    let h = 1e-5;
    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
    assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
    let mask = [true, false, false, true, true, true];
    let y = tape.softmax_masked(x, 1, Some(&mask)).unwrap();
    assert_eq!(&tape.value(y)[..3], &[1.0, 0.0, 0.0]);
    let all_masked = [false; 6];
    assert!(tape.softmax_masked(x, 1, Some(&all_masked)).is_err());
}

#[test]
fn elementwise_cases() {
    let mut tape = Tape::new();
    let z = tape.constant(vec![1], vec![0.0]).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s), &[0.5]);

    let c = tape.constant(vec![1, 4], vec![3.0; 4]).unwrap();
    let n = tape.layer_norm(c, None, None, 1e-5).unwrap();
    assert_eq!(tape.value(n), &[0.0; 4]);

    let x = tape.variable(vec![3], vec![3.0, 1.0, 3.0]).unwrap();
    let m = tape.max_over_axis(x, 0).unwrap();
    assert_eq!(tape.value(m), &[3.0]);
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn add_rejects_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    let b = tape.constant(vec![4], vec![0.0; 4]).unwrap();
    assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let uniform = tape.constant(vec![3, 4], vec![0.25; 12]).unwrap();
    let l = tape.cross_entropy(uniform, &[0, 1, 3]).unwrap();
    assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    assert!((tape.scalar(l) - 1.3863).abs() < 1e-4);

    let peaked = tape.constant(vec![1, 4], vec![0.0, 60.0, 0.0, 0.0]).unwrap();
    let l = tape.cross_entropy(peaked, &[1]).unwrap();
    assert!(tape.scalar(l) < 1e-20);

    assert!(matches!(
        tape.cross_entropy(peaked, &[4]),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random(&mut rng, vec![6, 5]);
    let targets = [0usize, 4, 2, 2, 1, 3];
    let mut oracle = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        oracle += lse - row[t];
    }
    oracle /= 6.0;
    let mut tape = Tape::new();
    let lv = tape.leaf(&logits);
    let l = tape.cross_entropy(lv, &targets).unwrap();
    assert!((tape.scalar(l) - oracle).abs() < 1e-10);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.variable(vec![2], vec![1.0, 2.0]).unwrap();
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1], vec![800.0]).unwrap();
    assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
    assert!(tape.constant(vec![1], vec![f64::NAN]).is_err());
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a34 = random(&mut rng, vec![3, 4]);
    let b34 = random(&mut rng, vec![3, 4]);
    let b42 = random(&mut rng, vec![4, 2]);
    let b54 = random(&mut rng, vec![5, 4]);
    let row4 = random(&mut rng, vec![4]);
    let col3 = random(&mut rng, vec![3]);
    let pos34 = positive(&mut rng, vec![3, 4]);
    let t234 = random(&mut rng, vec![2, 3, 4]);
    let table = random(&mut rng, vec![5, 3]);

    assert_grad_ok("matmul", &[a34.clone(), b42.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("matmul_nt", &[a34.clone(), b54.clone()], |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("transpose", std::slice::from_ref(&a34), |t, v| {
        let y = t.transpose(v[0])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("add/sub/mul", &[a34.clone(), b34.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let y = t.mul(s, d)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("add_row", &[a34.clone(), row4.clone()], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("mul_col", &[a34.clone(), col3.clone()], |t, v| {
        let y = t.mul_col(v[0], v[1])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("affine/one_minus", std::slice::from_ref(&a34), |t, v| {
        let y = t.affine(v[0], 0.1f64.recip(), 0.3)?;
        let y = t.one_minus(y)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("sigmoid", std::slice::from_ref(&a34), |t, v| {
        let y = t.sigmoid(v[0])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("gelu", std::slice::from_ref(&a34), |t, v| {
        let y = t.gelu(v[0])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("exp", std::slice::from_ref(&a34), |t, v| {
        let y = t.exp(v[0])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("log_floor", std::slice::from_ref(&pos34), |t, v| {
        let y = t.log_floor(v[0], 1e-12)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("layer_norm", &[a34.clone(), row4.clone(), random(&mut rng, vec![4])], |t, v| {
        let y = t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("concat axis 0", &[a34.clone(), b54.clone()], |t, v| {
        let y = t.concat(&[v[0], v[1]], 0)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("concat axis 1", &[a34.clone(), b34.clone()], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("slice", std::slice::from_ref(&t234), |t, v| {
        let y = t.slice(v[0], 2, 1, 2)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("reshape", std::slice::from_ref(&t234), |t, v| {
        let y = t.reshape(v[0], vec![6, 4])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("mean", std::slice::from_ref(&a34), |t, v| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    });
    assert_grad_ok("max_over_axis", std::slice::from_ref(&t234), |t, v| {
        let y = t.max_over_axis(v[0], 1)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("softmax axis 0", std::slice::from_ref(&a34), |t, v| {
        let y = t.softmax(v[0], 0)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("softmax axis 2", std::slice::from_ref(&t234), |t, v| {
        let y = t.softmax(v[0], 2)?;
        weighted_sum(t, y)
    });
    assert_grad_ok("masked softmax", std::slice::from_ref(&a34), |t, v| {
        let mask = [true, true, false, true, false, true, true, true, true, false, false, false];
        let mask: Vec<bool> = mask.iter().enumerate().map(|(i, &m)| m || i % 4 == 0).collect();
        let y = t.softmax_masked(v[0], 1, Some(&mask))?;
        weighted_sum(t, y)
    });
    assert_grad_ok("cross_entropy", std::slice::from_ref(&a34), |t, v| t.cross_entropy(v[0], &[3, 0, 1]));
    assert_grad_ok("gather_rows", std::slice::from_ref(&table), |t, v| {
        let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
        weighted_sum(t, y)
    });
    assert_grad_ok("gather", std::slice::from_ref(&table), |t, v| {
        let y = t.gather(v[0], &[14, 0, 3, 3, 7, 1], vec![2, 3])?;
        weighted_sum(t, y)
    });
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-700.0f64..700.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3, 4], values).unwrap();
        for axis in 0..2 {
            let y = tape.softmax(x, axis).unwrap();
            let v = tape.value(y);
            if axis == 1 {
                for r in 0..3 {
                    let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            } else {
                for c in 0..4 {
                    let s: f64 = (0..3).map(|r| v[r * 4 + c]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
            prop_assert!(v.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, vec![3, 4]);
        let w = random(&mut rng, vec![4, 2]);
        let targets = [1usize, 0, 1];
        let build = |tape: &mut Tape, av: Var, wv: Var| {
            let h = tape.matmul(av, wv).unwrap();
            let l1 = tape.cross_entropy(h, &targets).unwrap();
            let s = tape.sigmoid(h).unwrap();
            let l2 = tape.mean(s).unwrap();
            (l1, l2)
        };
        let mut wt = w.clone();
        wt.requires_grad = true;

        let mut joint = Tape::new();
        let (av, wv) = (joint.leaf(&a), joint.leaf(&wt));
        let (l1, l2) = build(&mut joint, av, wv);
        let total = joint.add(l1, l2).unwrap();
        joint.backward(total).unwrap();

        let mut split = Tape::new();
        let (av2, wv2) = (split.leaf(&a), split.leaf(&wt));
        let (m1, m2) = build(&mut split, av2, wv2);
        split.backward(m1).unwrap();
        split.backward(m2).unwrap();

        for (x, y) in joint.grad(wv).unwrap().iter().zip(split.grad(wv2).unwrap()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn registered_op_suite_covers_every_op() {
    let suite = mneme_tensor::gradcheck::registered_op_suite(DEFAULT_STEP).unwrap();
    let names: Vec<&str> = suite.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, mneme_tensor::REGISTERED_OPS);
    for (name, report) in &suite {
        assert!(report.checked > 0, "{name}");
        assert!(report.passes(1e-4), "{name}: {}", report.max_relative_error);
    }
}
